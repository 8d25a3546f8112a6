#pragma once

// Decision-making subjects. Synthetic agents are local, reproducible stand-ins
// for remote subjects; the LLM and human subjects live in llm_subject.hpp and
// the session service respectively.

#include <algorithm>
#include <memory>
#include <optional>
#include <string>
#include <string_view>

#include "advprobe/numerics.hpp"
#include "advprobe/tasks.hpp"

namespace advprobe {

/// What a subject is told before choosing on step `trial` (1-based).
struct Feedback {
    int trial = 1;
    std::optional<int> prev_action;
    double prev_reward = 0.0;
    Observation observation;
};

class Subject {
public:
    virtual ~Subject() = default;

    virtual std::string id() const = 0;
    /// True when act() never consumes randomness.
    virtual bool deterministic() const = 0;
    /// Clears per-episode memory.
    virtual void reset() = 0;
    virtual int act(const Feedback& fb, Rng& rng) = 0;
    virtual std::unique_ptr<Subject> clone() const = 0;
};

enum class SubjectKind { wsls, rw_softmax, sticky, llm, human_proxy };

inline SubjectKind parse_subject_kind(std::string_view s) {
    if (s == "wsls") return SubjectKind::wsls;
    if (s == "rw-softmax" || s == "rw_softmax") return SubjectKind::rw_softmax;
    if (s == "sticky") return SubjectKind::sticky;
    if (s == "llm") return SubjectKind::llm;
    if (s == "human" || s == "human-proxy" || s == "human_proxy") return SubjectKind::human_proxy;
    throw InvalidInput("unknown subject kind '" + std::string(s) + "'");
}

struct WslsParams {
    int start_arm = 0;
    int start_investment = 10;
    int step_down = 5;
};

struct RwSoftmaxParams {
    double alpha = 0.3;
    double beta = 3.0;
    double initial_value = 0.0;        // bandit arm values
    double initial_trust_value = 1.0;  // trust: value of keeping the endowment
};

struct StickyParams {
    int exploration_trials = 5;
    double stickiness = 0.98;
};

// ---------------------------------------------------------------------------

/// Win-stay / lose-shift. Trust variant keeps its investment while the
/// trustee returns at least half of what it received, else cuts by
/// `step_down` units (floor 0).
class WslsSubject final : public Subject {
public:
    WslsSubject(TaskSpec task, WslsParams p) : task_(std::move(task)), p_(p) {
        if (p_.start_arm != 0 && p_.start_arm != 1) throw InvalidInput("wsls: start arm must be 0 or 1");
        if (p_.start_investment < 0 || p_.start_investment > task_.trust.endowment)
            throw InvalidInput("wsls: start investment out of range");
    }

    std::string id() const override { return "wsls"; }
    bool deterministic() const override { return true; }
    void reset() override {}

    int act(const Feedback& fb, Rng&) override {
        if (task_.kind == TaskKind::bandit) {
            if (!fb.prev_action) return p_.start_arm;
            return fb.prev_reward > 0.0 ? *fb.prev_action : 1 - *fb.prev_action;
        }
        if (!fb.prev_action) return p_.start_investment;
        const auto* obs = std::get_if<TrustObservation>(&fb.observation);
        if (!obs) throw InvalidInput("wsls: trust feedback without observation");
        if (2 * obs->repayment_q >= obs->received_q) return *fb.prev_action;
        return std::max(0, *fb.prev_action - p_.step_down);
    }

    std::unique_ptr<Subject> clone() const override { return std::make_unique<WslsSubject>(*this); }

private:
    TaskSpec task_;
    WslsParams p_;
};

/// Rescorla-Wagner values with softmax choice. Bandit: one value per arm,
/// updated toward the payout. Trust: one value per integer investment,
/// updated toward the round's earnings divided by the endowment.
class RwSoftmaxSubject final : public Subject {
public:
    RwSoftmaxSubject(TaskSpec task, RwSoftmaxParams p) : task_(std::move(task)), p_(p) {
        if (!(p_.alpha > 0.0 && p_.alpha <= 1.0)) throw InvalidInput("rw_softmax: alpha must be in (0,1]");
        if (!(p_.beta >= 0.0)) throw InvalidInput("rw_softmax: beta must be >= 0");
        reset();
    }

    std::string id() const override { return "rw-softmax"; }
    bool deterministic() const override { return false; }

    void reset() override {
        if (task_.kind == TaskKind::bandit)
            values_.assign(2, p_.initial_value);
        else
            values_.assign(static_cast<std::size_t>(task_.trust.endowment) + 1, p_.initial_trust_value);
    }

    int act(const Feedback& fb, Rng& rng) override {
        if (fb.prev_action) {
            const auto a = static_cast<std::size_t>(*fb.prev_action);
            if (a >= values_.size()) throw InvalidInput("rw_softmax: previous action out of range");
            double target = fb.prev_reward;
            if (task_.kind == TaskKind::trust) {
                const auto* obs = std::get_if<TrustObservation>(&fb.observation);
                if (!obs) throw InvalidInput("rw_softmax: trust feedback without observation");
                const double earned = (task_.trust.endowment - *fb.prev_action) + quarters_to_units(obs->repayment_q);
                target = earned / task_.trust.endowment;
            }
            values_[a] += p_.alpha * (target - values_[a]);
        }
        Vector logits(values_.size());
        for (std::size_t i = 0; i < values_.size(); ++i) logits[i] = p_.beta * values_[i];
        return static_cast<int>(rng.categorical(softmax(logits)));
    }

    const Vector& values() const { return values_; }

    std::unique_ptr<Subject> clone() const override { return std::make_unique<RwSoftmaxSubject>(*this); }

private:
    TaskSpec task_;
    RwSoftmaxParams p_;
    Vector values_;
};

/// Explores uniformly for at most `exploration_trials` steps, committing as
/// soon as an exploratory choice pays off (bandit) or is repaid at least half
/// (trust). Once committed it repeats its last choice with probability
/// `stickiness`, otherwise picks uniformly.
class StickySubject final : public Subject {
public:
    StickySubject(TaskSpec task, StickyParams p) : task_(std::move(task)), p_(p) {
        if (p_.exploration_trials < 0) throw InvalidInput("sticky: exploration trials must be >= 0");
        if (!(p_.stickiness >= 0.0 && p_.stickiness <= 1.0))
            throw InvalidInput("sticky: stickiness must be in [0,1]");
    }

    std::string id() const override { return "sticky"; }
    bool deterministic() const override { return false; }
    void reset() override { committed_ = false; }

    int act(const Feedback& fb, Rng& rng) override {
        const auto n = static_cast<std::uint64_t>(task_.action_dim());
        if (!fb.prev_action) {
            committed_ = false;
            return static_cast<int>(rng.below(n));
        }
        if (!committed_ && (fb.trial - 1 >= p_.exploration_trials || paid_off(fb))) committed_ = true;
        if (committed_ && rng.bernoulli(p_.stickiness)) return *fb.prev_action;
        return static_cast<int>(rng.below(n));
    }

    bool committed() const { return committed_; }

    std::unique_ptr<Subject> clone() const override { return std::make_unique<StickySubject>(*this); }

private:
    bool paid_off(const Feedback& fb) const {
        if (task_.kind == TaskKind::bandit) return fb.prev_reward > 0.0;
        const auto* obs = std::get_if<TrustObservation>(&fb.observation);
        return obs && obs->received_q > 0 && 2 * obs->repayment_q >= obs->received_q;
    }

    TaskSpec task_;
    StickyParams p_;
    bool committed_ = false;
};

/// Placeholder for a person driving the session service; actions arrive over
/// HTTP, so asking it to act is a usage error.
class HumanProxySubject final : public Subject {
public:
    std::string id() const override { return "human"; }
    bool deterministic() const override { return false; }
    void reset() override {}
    int act(const Feedback&, Rng&) override {
        throw InvalidInput("human subjects act through the session service, not synthetic_act");
    }
    std::unique_ptr<Subject> clone() const override { return std::make_unique<HumanProxySubject>(); }
};

struct SyntheticPolicy {
    SubjectKind kind = SubjectKind::wsls;
    WslsParams wsls;
    RwSoftmaxParams rw;
    StickyParams sticky;
};

inline std::unique_ptr<Subject> make_synthetic_subject(const TaskSpec& task, const SyntheticPolicy& policy) {
    switch (policy.kind) {
        case SubjectKind::wsls: return std::make_unique<WslsSubject>(task, policy.wsls);
        case SubjectKind::rw_softmax: return std::make_unique<RwSoftmaxSubject>(task, policy.rw);
        case SubjectKind::sticky: return std::make_unique<StickySubject>(task, policy.sticky);
        case SubjectKind::human_proxy: return std::make_unique<HumanProxySubject>();
        case SubjectKind::llm: break;
    }
    throw InvalidInput("make_synthetic_subject: llm subjects need an endpoint configuration");
}

}  // namespace advprobe
