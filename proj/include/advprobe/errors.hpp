#pragma once

#include <stdexcept>
#include <string>

namespace advprobe {

/// Base of every error raised by the library. `kind()` is a stable tag used by
/// the CLI and the HTTP service to map failures onto exit codes / status codes.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}

    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

#define ADVPROBE_DEFINE_ERROR(Name, tag)                                      \
    class Name : public Error {                                               \
    public:                                                                   \
        explicit Name(const std::string& what) : Error(tag, what) {}          \
    }

ADVPROBE_DEFINE_ERROR(InvalidInput, "invalid-input");
ADVPROBE_DEFINE_ERROR(ConstraintViolation, "constraint-violation");
ADVPROBE_DEFINE_ERROR(DataCorruption, "data-corruption");
ADVPROBE_DEFINE_ERROR(ConfigError, "configuration");
ADVPROBE_DEFINE_ERROR(NotFound, "not-found");
ADVPROBE_DEFINE_ERROR(Conflict, "conflict");
ADVPROBE_DEFINE_ERROR(VersionError, "version");
ADVPROBE_DEFINE_ERROR(TrainingDivergence, "training-divergence");
ADVPROBE_DEFINE_ERROR(NonDeterministic, "non-deterministic");

#undef ADVPROBE_DEFINE_ERROR

/// A reply from a subject that could not be turned into an action. Retriable:
/// the caller re-prompts until its retry limit is reached.
class ParseFailure : public Error {
public:
    ParseFailure(const std::string& what, std::string raw)
        : Error("parse-failure", what), raw_(std::move(raw)) {}

    const std::string& raw_text() const noexcept { return raw_; }

private:
    std::string raw_;
};

/// Raised when a live subject cannot continue an episode (LLM retries
/// exhausted, transport failure). The episode is logged as aborted.
class SubjectAborted : public Error {
public:
    explicit SubjectAborted(const std::string& what) : Error("subject-aborted", what) {}
};

}  // namespace advprobe
