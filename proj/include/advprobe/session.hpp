#pragma once

// In-memory closed-loop sessions for a human (or any remote) subject. Each
// session wraps one EpisodeRunner; requests on one session are serialized and
// sessions share nothing but read-only checkpoints.

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <cctype>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>

#include <json.hpp>

#include "advprobe/checkpoint.hpp"
#include "advprobe/episode_io.hpp"
#include "advprobe/pipeline.hpp"
#include "advprobe/prompts.hpp"

namespace advprobe {

// ---------------------------------------------------------------------------
// Checkpoint-directory lock: a server holds it exclusively; training
// commands probe it and refuse to run while it is held.
// ---------------------------------------------------------------------------

inline constexpr const char* kServeLockName = ".advprobe-serve.lock";

class DirectoryLock {
public:
    DirectoryLock() = default;
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;
    DirectoryLock(DirectoryLock&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
    DirectoryLock& operator=(DirectoryLock&& o) noexcept {
        if (this != &o) {
            release();
            fd_ = std::exchange(o.fd_, -1);
        }
        return *this;
    }
    ~DirectoryLock() { release(); }

    /// Takes the serving lock on `dir`; throws Conflict if another server holds it.
    static DirectoryLock acquire_serving(const std::filesystem::path& dir) { return take(dir, LOCK_EX, "serving"); }

    /// Takes a shared lock for a training command; throws Conflict while a
    /// server holds the directory.
    static DirectoryLock acquire_training(const std::filesystem::path& dir) { return take(dir, LOCK_SH, "training"); }

    bool held() const noexcept { return fd_ >= 0; }

private:
    static DirectoryLock take(const std::filesystem::path& dir, int mode, const char* what) {
        std::filesystem::path d = dir.empty() ? std::filesystem::path(".") : dir;
        std::filesystem::create_directories(d);
        const auto file = d / kServeLockName;
        DirectoryLock l;
        l.fd_ = ::open(file.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
        if (l.fd_ < 0) throw ConfigError("cannot open lock file " + file.string());
        if (::flock(l.fd_, mode | LOCK_NB) != 0)
            throw Conflict(std::string(what) + " refused: checkpoint directory " + d.string() +
                           " is in use by a serving instance");
        return l;
    }

    void release() noexcept {
        if (fd_ >= 0) {
            ::flock(fd_, LOCK_UN);
            ::close(fd_);
            fd_ = -1;
        }
    }

    int fd_ = -1;
};

// ---------------------------------------------------------------------------
// Sessions
// ---------------------------------------------------------------------------

struct SessionServiceConfig {
    std::filesystem::path checkpoint_dir;  // relative checkpoint refs resolve here
    std::string default_learner;           // used when a request names none
    std::string default_adversary = "random";
    std::optional<std::filesystem::path> log_dir;  // write-through of finished sessions
    std::optional<std::uint64_t> id_seed;          // fixed seed for ids and default episode seeds
};

class SessionManager {
public:
    explicit SessionManager(SessionServiceConfig cfg) : cfg_(std::move(cfg)) {
        const std::uint64_t s = cfg_.id_seed ? *cfg_.id_seed : (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^
                                                                    std::random_device{}();
        ids_ = Rng(s);
    }

    /// POST /sessions. Request: {task, adversary?, learner?, seed?}.
    nlohmann::json create(const nlohmann::json& req) {
        if (!req.is_object()) throw InvalidInput("request body must be a JSON object");
        const std::string learner_ref = req.contains("learner") && !req["learner"].is_null()
                                            ? req["learner"].get<std::string>()
                                            : cfg_.default_learner;
        const std::string adversary_ref = req.contains("adversary") && !req["adversary"].is_null()
                                              ? req["adversary"].get<std::string>()
                                              : cfg_.default_adversary;

        std::shared_ptr<const LearnerCheckpoint> learner;
        if (!learner_ref.empty()) learner = learner_checkpoint(learner_ref);

        TaskSpec task = requested_task(req, learner.get());

        AdversaryHandle adversary = RandomAdversary{};
        if (adversary_ref != "random") {
            const auto adv = adversary_checkpoint(adversary_ref);
            if (adv->task.kind != task.kind) throw InvalidInput("adversary checkpoint was trained for another task");
            if (!learner) throw InvalidInput("a trained adversary needs a learner checkpoint");
            if (!adv->learner_digest.empty() && adv->learner_digest != learner->digest)
                throw InvalidInput("adversary checkpoint was trained against a different learner");
            adversary = TrainedAdversary{adv->qnet, adv->objective};
        }

        auto session = std::make_shared<Session>();
        session->learner = learner;
        std::lock_guard<std::mutex> g(map_mutex_);
        const std::uint64_t seed =
            req.contains("seed") && !req["seed"].is_null() ? req["seed"].get<std::uint64_t>() : ids_.next_u64();
        session->id = fresh_id();
        session->runner.emplace(task, std::move(adversary), learner ? &learner->params : nullptr, episode_counter_++,
                                seed, "human");
        sessions_[session->id] = session;
        return {{"id", session->id},
                {"trial", 1},
                {"seed", seed},
                {"task", task_json(task)},
                {"context", context(*session->runner)}};
    }

    /// POST /sessions/{id}/action. Body: {action: int | label, trial?}.
    nlohmann::json advance(const std::string& id, const nlohmann::json& body) {
        auto s = find(id);
        std::unique_lock<std::mutex> busy(s->mutex, std::try_to_lock);
        if (!busy.owns_lock()) throw Conflict("another request for session " + id + " is in flight");
        if (!body.is_object() || !body.contains("action")) throw InvalidInput("body must contain \"action\"");
        auto& runner = *s->runner;
        const int action = parse_action(runner.task(), body["action"]);

        if (body.contains("trial") && !body["trial"].is_null()) {
            if (!body["trial"].is_number_integer()) throw InvalidInput("\"trial\" must be an integer");
            const int trial = body["trial"].get<int>();
            if (trial >= 1 && trial < runner.trial()) {
                if (s->actions[static_cast<std::size_t>(trial - 1)] == action)
                    return s->responses[static_cast<std::size_t>(trial - 1)];
                throw Conflict("trial " + std::to_string(trial) + " was already played with a different action");
            }
            if (runner.done()) throw Conflict("session " + id + " is finished");
            if (trial != runner.trial())
                throw Conflict("expected trial " + std::to_string(runner.trial()) + ", got " + std::to_string(trial));
        }
        if (runner.done()) throw Conflict("session " + id + " is finished");

        const TrialRecord& rec = runner.step(action);
        nlohmann::json resp = {{"trial", rec.t},
                               {"action", rec.action},
                               {"reward", rec.reward},
                               {"observation", observation_json(rec.observation)},
                               {"done", runner.done()}};
        if (runner.task().kind == TaskKind::trust) {
            resp["repayment"] = quarters_to_units(rec.repayment_q);
            resp["repay_q"] = rec.repayment_q;
        }
        if (runner.done()) {
            resp["summary"] = summary(runner);
            if (cfg_.log_dir) {
                const EpisodeLog& log = runner.log();
                write_ndjson_file(*cfg_.log_dir / (id + ".ndjson"), std::span<const EpisodeLog>(&log, 1));
            }
        } else {
            resp["next_trial"] = runner.trial();
            resp["context"] = context(runner);
        }
        s->actions.push_back(action);
        s->responses.push_back(resp);
        return resp;
    }

    /// GET /sessions/{id}.
    nlohmann::json state(const std::string& id) {
        auto s = find(id);
        std::unique_lock<std::mutex> busy(s->mutex, std::try_to_lock);
        if (!busy.owns_lock()) throw Conflict("another request for session " + id + " is in flight");
        const auto& runner = *s->runner;
        const auto& log = runner.log();
        nlohmann::json history = nlohmann::json::array();
        for (const auto& r : log.trials) history.push_back(trial_json(log, r));
        nlohmann::json j = {{"id", id},
                            {"task", task_json(runner.task())},
                            {"status", runner.done() ? "done" : "active"},
                            {"trial", runner.trial()},
                            {"horizon", runner.task().horizon()},
                            {"seed", log.seed},
                            {"history", history}};
        if (runner.task().kind == TaskKind::bandit) {
            int target = 0;
            double total = 0.0;
            for (const auto& r : log.trials) {
                target += r.action == runner.task().bandit.target_arm;
                total += r.reward;
            }
            j["totals"] = {{"rewards", total}, {"target_choices", target}};
        } else {
            j["totals"] = {{"investor", quarters_to_units(runner.trust_state().investor_total_q)},
                           {"trustee", quarters_to_units(runner.trust_state().trustee_total_q)},
                           {"investor_q", runner.trust_state().investor_total_q},
                           {"trustee_q", runner.trust_state().trustee_total_q}};
        }
        if (runner.done())
            j["summary"] = summary(runner);
        else
            j["context"] = context(runner);
        return j;
    }

    /// GET /sessions/{id}/log: the transcript in episode-log format.
    std::string log_ndjson(const std::string& id) {
        auto s = find(id);
        std::unique_lock<std::mutex> busy(s->mutex, std::try_to_lock);
        if (!busy.owns_lock()) throw Conflict("another request for session " + id + " is in flight");
        const EpisodeLog& log = s->runner->log();
        return to_ndjson(std::span<const EpisodeLog>(&log, 1));
    }

    /// A copy of the session's episode log.
    EpisodeLog episode_log(const std::string& id) {
        auto s = find(id);
        std::lock_guard<std::mutex> g(s->mutex);
        return s->runner->log();
    }

    /// DELETE /sessions/{id}.
    void remove(const std::string& id) {
        std::lock_guard<std::mutex> g(map_mutex_);
        if (sessions_.erase(id) == 0) throw NotFound("unknown session " + id);
    }

    std::size_t size() const {
        std::lock_guard<std::mutex> g(map_mutex_);
        return sessions_.size();
    }

private:
    struct Session {
        std::string id;
        std::mutex mutex;
        std::shared_ptr<const LearnerCheckpoint> learner;
        std::optional<EpisodeRunner> runner;
        std::vector<int> actions;
        std::vector<nlohmann::json> responses;
    };

    std::shared_ptr<Session> find(const std::string& id) {
        std::lock_guard<std::mutex> g(map_mutex_);
        const auto it = sessions_.find(id);
        if (it == sessions_.end()) throw NotFound("unknown session " + id);
        return it->second;
    }

    std::string fresh_id() {
        for (;;) {
            char buf[33];
            std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(ids_.next_u64()),
                          static_cast<unsigned long long>(ids_.next_u64()));
            if (!sessions_.count(buf)) return buf;
        }
    }

    std::filesystem::path resolve(const std::string& ref) const {
        std::filesystem::path p(ref);
        if (p.is_relative() && !cfg_.checkpoint_dir.empty()) p = cfg_.checkpoint_dir / p;
        return p;
    }

    std::shared_ptr<const LearnerCheckpoint> learner_checkpoint(const std::string& ref) {
        const auto p = resolve(ref);
        std::lock_guard<std::mutex> g(cache_mutex_);
        auto& slot = learners_[p.string()];
        if (!slot) slot = std::make_shared<const LearnerCheckpoint>(load_learner(p));
        return slot;
    }

    std::shared_ptr<const AdversaryCheckpoint> adversary_checkpoint(const std::string& ref) {
        const auto p = resolve(ref);
        std::lock_guard<std::mutex> g(cache_mutex_);
        auto& slot = adversaries_[p.string()];
        if (!slot) slot = std::make_shared<const AdversaryCheckpoint>(load_adversary(p));
        return slot;
    }

    static TaskSpec requested_task(const nlohmann::json& req, const LearnerCheckpoint* learner) {
        TaskSpec task;
        const auto it = req.find("task");
        if (it == req.end() || it->is_null()) {
            if (!learner) throw InvalidInput("request needs a task");
            task = learner->task;
        } else if (it->is_string()) {
            const TaskKind kind = parse_task(it->get<std::string>());
            if (learner && learner->task.kind == kind)
                task = learner->task;
            else
                task.kind = kind;
        } else if (it->is_object()) {
            try {
                task = task_from_json(*it);
            } catch (const nlohmann::json::exception& e) {
                throw InvalidInput(std::string("bad task: ") + e.what());
            }
        } else {
            throw InvalidInput("\"task\" must be a name or an object");
        }
        if (learner && learner->task.kind != task.kind)
            throw InvalidInput("learner checkpoint was trained on task '" + std::string(to_string(learner->task.kind)) +
                               "'");
        task.validate();
        return task;
    }

    static int parse_action(const TaskSpec& task, const nlohmann::json& a) {
        const int max_action = task.action_dim() - 1;
        const std::string range = "action must be in 0.." + std::to_string(max_action);
        if (a.is_number_integer()) {
            const auto v = a.get<long long>();
            if (v < 0 || v > max_action) throw InvalidInput(range + ", got " + std::to_string(v));
            return static_cast<int>(v);
        }
        if (a.is_string() && task.kind == TaskKind::bandit) {
            const PromptTemplates tpl;
            std::string s = a.get<std::string>();
            for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
            auto lower = [](std::string x) {
                for (auto& c : x) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
                return x;
            };
            if (s == lower(tpl.label_x)) return 0;
            if (s == lower(tpl.label_y)) return 1;
            throw InvalidInput(range + " or \"" + tpl.label_x + "\"/\"" + tpl.label_y + "\"");
        }
        throw InvalidInput(range);
    }

    static nlohmann::json context(const EpisodeRunner& r) {
        const auto& task = r.task();
        if (task.kind == TaskKind::bandit) {
            const PromptTemplates tpl;
            return {{"trial", r.trial()}, {"trials", task.bandit.trials}, {"choices", {tpl.label_x, tpl.label_y}}};
        }
        return {{"round", r.trial()},
                {"rounds", task.trust.rounds},
                {"endowment", task.trust.endowment},
                {"multiplier", task.trust.multiplier},
                {"min_investment", 0},
                {"max_investment", task.trust.endowment}};
    }

    static nlohmann::json summary(const EpisodeRunner& r) {
        const EpisodeLog& log = r.log();
        const std::span<const EpisodeLog> one(&log, 1);
        nlohmann::json j = metrics_report(r.task(), one);
        if (r.task().kind == TaskKind::bandit)
            j["episode"] = to_json(bandit_episode_metrics(log, r.task().bandit.target_arm));
        else
            j["episode"] = to_json(trust_episode_metrics(log, r.task().trust));
        return j;
    }

    SessionServiceConfig cfg_;
    mutable std::mutex map_mutex_;
    std::mutex cache_mutex_;
    std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
    std::map<std::string, std::shared_ptr<const LearnerCheckpoint>> learners_;
    std::map<std::string, std::shared_ptr<const AdversaryCheckpoint>> adversaries_;
    Rng ids_;
    int episode_counter_ = 0;
};

}  // namespace advprobe
