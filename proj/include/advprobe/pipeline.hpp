#pragma once

// The four phases: collect episodes from a subject, fit the learner model,
// train an adversary against the learner model, run the adversary against
// the live subject.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "advprobe/adversary.hpp"
#include "advprobe/checkpoint.hpp"
#include "advprobe/episode.hpp"
#include "advprobe/learner.hpp"
#include "advprobe/metrics.hpp"
#include "advprobe/subjects.hpp"

namespace advprobe {

struct RandomAdversary {};

struct TrainedAdversary {
    QNetParams qnet;
    Objective objective = Objective::target;
};

using AdversaryHandle = std::variant<RandomAdversary, TrainedAdversary>;

inline bool is_trained(const AdversaryHandle& a) { return std::holds_alternative<TrainedAdversary>(a); }

inline void check_compatible(const TaskSpec& task, const AdversaryHandle& adv, const LearnerParams* learner) {
    if (learner) {
        if (learner->input_dim() != kFeatureDim ||
            learner->action_dim() != static_cast<std::size_t>(task.action_dim()))
            throw InvalidInput("learner dimensions do not match the task");
    }
    if (const auto* t = std::get_if<TrainedAdversary>(&adv)) {
        if (!learner) throw InvalidInput("a trained adversary needs the learner model it was trained against");
        if (objective_task(t->objective) != task.kind)
            throw InvalidInput("objective '" + std::string(to_string(t->objective)) + "' does not apply to task '" +
                               std::string(to_string(task.kind)) + "'");
        if (t->qnet.input_dim() != adv_state_dim(task.kind, learner->hidden_dim()) ||
            t->qnet.action_count() != static_cast<std::size_t>(task.adversary_actions()))
            throw InvalidInput("adversary network does not match learner/task dimensions");
    }
}

// ---------------------------------------------------------------------------
// Phase A / D: one episode with a subject in the loop.
// ---------------------------------------------------------------------------

/// Step-by-step episode driver shared by run_episode and the session
/// service. The adversary's move for a bandit trial is fixed before the
/// subject chooses; the trustee moves after seeing the investment. With a
/// learner the adversary sees its hidden state, advanced in observer mode
/// from the subject's realized choices, and that state is recorded on every
/// trial.
class EpisodeRunner {
public:
    EpisodeRunner(const TaskSpec& task, AdversaryHandle adversary, const LearnerParams* learner, int episode,
                  std::uint64_t episode_seed, std::string subject_id)
        : task_(task), adversary_(std::move(adversary)), learner_(learner),
          adversary_rng_(stream(episode_seed, Stream::exploration)) {
        task_.validate();
        check_compatible(task_, adversary_, learner_);
        log_.task = task_.kind;
        log_.subject = std::move(subject_id);
        log_.episode = episode;
        log_.seed = episode_seed;
        if (learner_) h_ = observe_action(*learner_, Vector(learner_->hidden_dim(), 0.0), Vector(kFeatureDim, 0.0));
        plan_allocation();
    }

    const TaskSpec& task() const noexcept { return task_; }
    /// 1-based index of the next trial; horizon + 1 once done.
    int trial() const noexcept { return static_cast<int>(log_.trials.size()) + 1; }
    bool done() const noexcept { return trial() > task_.horizon(); }
    const HiddenState& hidden() const noexcept { return h_; }
    const std::optional<Allocation>& pending_allocation() const noexcept { return allocation_; }
    const BanditState& bandit_state() const noexcept { return bandit_; }
    const TrustState& trust_state() const noexcept { return trust_; }
    EpisodeLog& log() noexcept { return log_; }
    const EpisodeLog& log() const noexcept { return log_; }

    /// Legal subject actions are 0..max_action().
    int max_action() const noexcept { return task_.action_dim() - 1; }

    /// What the subject sees before its next choice.
    Feedback feedback() const {
        Feedback fb;
        fb.trial = trial();
        if (!log_.trials.empty()) {
            const auto& last = log_.trials.back();
            fb.prev_action = last.action;
            fb.prev_reward = last.reward;
            fb.observation = last.observation;
        }
        return fb;
    }

    /// Applies the subject's action for the current trial.
    const TrialRecord& step(int action) {
        if (done()) throw Conflict("episode already finished");
        if (action < 0 || action > max_action())
            throw InvalidInput("action must be in 0.." + std::to_string(max_action()) + ", got " +
                               std::to_string(action));
        const int t = trial();
        const auto* trained = std::get_if<TrainedAdversary>(&adversary_);
        TrialRecord rec;
        rec.t = t;
        rec.hidden = h_;
        if (task_.kind == TaskKind::bandit) {
            const auto res = bandit_step(bandit_, task_.bandit, *allocation_, action);
            rec.reward = res.reward;
            rec.allocation = *allocation_;
            rec.observation = res.observation;
        } else {
            int repay;
            if (trained) {
                const auto q = q_values(trained->qnet, trust_adv_state(h_, trust_, task_.trust, action));
                repay = select_masked_action(q, ActionMask(q.size(), 1), 0.0, adversary_rng_);
            } else {
                repay = static_cast<int>(adversary_rng_.below(task_.trust.repay_actions()));
            }
            const auto res = trust_step(trust_, task_.trust, action, repay);
            rec.reward = quarters_to_units(res.repayment_q);
            rec.repay_action = repay;
            rec.repayment_q = res.repayment_q;
            rec.observation = res.observation;
        }
        rec.action = action;
        if (learner_)
            h_ = observe_action(*learner_, h_, encode_step_features(task_, rec.action, rec.reward, rec.observation, t));
        else
            rec.hidden.clear();
        log_.trials.push_back(std::move(rec));
        plan_allocation();
        return log_.trials.back();
    }

private:
    void plan_allocation() {
        allocation_.reset();
        if (task_.kind != TaskKind::bandit || done()) return;
        if (const auto* trained = std::get_if<TrainedAdversary>(&adversary_)) {
            const auto q = q_values(trained->qnet, bandit_adv_state(h_, bandit_, task_.bandit));
            allocation_ = allocation_from_action(
                select_masked_action(q, bandit_action_mask(bandit_, task_.bandit), 0.0, adversary_rng_));
        } else {
            allocation_ = random_bandit_allocation(bandit_, task_.bandit, adversary_rng_);
        }
    }

    TaskSpec task_;
    AdversaryHandle adversary_;
    const LearnerParams* learner_;
    Rng adversary_rng_;
    EpisodeLog log_;
    HiddenState h_;
    BanditState bandit_;
    TrustState trust_;
    std::optional<Allocation> allocation_;
};

/// Runs one episode with a subject in the loop.
inline EpisodeLog run_episode(const TaskSpec& task, Subject& subject, const AdversaryHandle& adversary,
                              const LearnerParams* learner, int episode, std::uint64_t episode_seed) {
    EpisodeRunner runner(task, adversary, learner, episode, episode_seed, subject.id());
    Rng subject_rng = stream(episode_seed, Stream::data);
    subject.reset();
    try {
        while (!runner.done()) runner.step(subject.act(runner.feedback(), subject_rng));
    } catch (const SubjectAborted& e) {
        runner.log().aborted = true;
        runner.log().abort_reason = e.what();
    }
    return std::move(runner.log());
}

/// Runs `n_episodes` episodes; episode i uses seed derive_seed(seed, i).
/// Aborted episodes are returned with `aborted` set; callers exclude them
/// from training.
inline std::vector<EpisodeLog> collect_episodes(const TaskSpec& task, const Subject& prototype,
                                                const AdversaryHandle& adversary, const LearnerParams* learner,
                                                int n_episodes, std::uint64_t seed) {
    task.validate();
    if (n_episodes < 1) throw InvalidInput("collect_episodes: need at least one episode");
    std::vector<EpisodeLog> out;
    out.reserve(static_cast<std::size_t>(n_episodes));
    auto subject = prototype.clone();
    for (int i = 0; i < n_episodes; ++i)
        out.push_back(run_episode(task, *subject, adversary, learner, i, derive_seed(seed, static_cast<std::uint64_t>(i))));
    return out;
}

inline std::vector<EpisodeLog> completed(std::span<const EpisodeLog> logs) {
    std::vector<EpisodeLog> out;
    for (const auto& e : logs)
        if (!e.aborted) out.push_back(e);
    return out;
}

// ---------------------------------------------------------------------------
// Phase C: adversary training against the learner model.
// ---------------------------------------------------------------------------

struct DqnConfig {
    std::size_t hidden1 = 64;
    std::size_t hidden2 = 64;
    double gamma = 1.0;
    std::size_t buffer = 50000;
    std::size_t batch = 64;
    std::size_t target_sync = 500;  // updates between target-network copies
    double epsilon_start = 1.0;
    double epsilon_end = 0.05;
    double epsilon_decay_fraction = 0.5;  // of training episodes
    int episodes = 20000;
    double lr = 1e-3;
    std::size_t train_every = 1;  // environment steps per update
    std::size_t warmup = 1000;    // transitions before the first update
    double grad_clip = 10.0;
    double reward_scale = 1.0;
    std::uint64_t seed = 0;
    int curve_window = 1000;
};

inline nlohmann::json to_json(const DqnConfig& c) {
    return {{"hidden1", c.hidden1},     {"hidden2", c.hidden2},
            {"gamma", c.gamma},         {"buffer", c.buffer},
            {"batch", c.batch},         {"target_sync", c.target_sync},
            {"epsilon_start", c.epsilon_start}, {"epsilon_end", c.epsilon_end},
            {"epsilon_decay_fraction", c.epsilon_decay_fraction},
            {"episodes", c.episodes},   {"lr", c.lr},
            {"train_every", c.train_every}, {"warmup", c.warmup},
            {"grad_clip", c.grad_clip}, {"reward_scale", c.reward_scale},
            {"seed", c.seed},           {"curve_window", c.curve_window}};
}

struct AdversaryTraining {
    TrainedAdversary adversary;
    std::vector<double> curve;            // mean episode return per window
    std::vector<double> episode_returns;  // unscaled adversarial return per episode
    std::size_t updates = 0;
    double last_loss = 0.0;
    bool diverged = false;
    std::string divergence_reason;
};

/// Trustee reward for the FAIR objective at the end of an episode:
/// joint earnings minus twice the gap, both over rounds*endowment*multiplier.
inline double fair_terminal_reward(const TrustState& s, const TrustConfig& cfg) {
    const double scale = static_cast<double>(cfg.rounds) * cfg.endowment * cfg.multiplier;
    const double inv = quarters_to_units(s.investor_total_q) / scale;
    const double tr = quarters_to_units(s.trustee_total_q) / scale;
    return (inv + tr) - 2.0 * std::abs(inv - tr);
}

/// MAX: the trustee's net gain for the round, over endowment*multiplier.
inline double max_round_reward(int investment, std::int64_t repayment_q, const TrustConfig& cfg) {
    const double gain = static_cast<double>(cfg.multiplier) * investment - quarters_to_units(repayment_q);
    return gain / (static_cast<double>(cfg.endowment) * cfg.multiplier);
}

inline double epsilon_at(const DqnConfig& c, int episode) {
    const double decay_eps = std::max(1.0, c.epsilon_decay_fraction * c.episodes);
    const double frac = static_cast<double>(episode) / decay_eps;
    if (frac >= 1.0) return c.epsilon_end;
    return c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start);
}

/// Deep Q-learning against simulated learner-model episodes. The learner
/// model acts by sampling from its own policy.
inline AdversaryTraining train_adversary_loop(const LearnerParams& learner, const TaskSpec& task, Objective objective,
                                              const DqnConfig& cfg) {
    task.validate();
    if (objective_task(objective) != task.kind)
        throw InvalidInput("objective does not match the learner's task");
    if (learner.action_dim() != static_cast<std::size_t>(task.action_dim()))
        throw InvalidInput("learner action dimension does not match the task");

    Rng init_rng = stream(cfg.seed, Stream::init);
    Rng learner_rng = stream(cfg.seed, Stream::data);
    Rng explore_rng = stream(cfg.seed, Stream::exploration);

    const std::size_t sdim = adv_state_dim(task.kind, learner.hidden_dim());
    const auto n_act = static_cast<std::size_t>(task.adversary_actions());
    AdversaryTraining out;
    out.adversary.objective = objective;
    out.adversary.qnet = QNetParams::random(sdim, cfg.hidden1, cfg.hidden2, n_act, init_rng);
    QNetParams target = out.adversary.qnet;
    QNetParams& q = out.adversary.qnet;
    AdamState opt(q.size(), cfg.lr);
    ReplayBuffer replay(cfg.buffer);
    std::size_t steps = 0;

    auto maybe_update = [&] {
        ++steps;
        if (replay.size() < std::max(cfg.warmup, cfg.batch) || steps % cfg.train_every != 0) return;
        const auto batch = replay.sample(cfg.batch, explore_rng);
        out.last_loss = dqn_update(q, target, batch, cfg.gamma, opt, cfg.grad_clip).loss;
        if (++out.updates % cfg.target_sync == 0) target = q;
    };
    auto sample_action = [&](const PolicyDistribution& pi) { return static_cast<int>(learner_rng.categorical(pi)); };

    double window_sum = 0.0;
    int window_n = 0;
    const Vector zeros_h(learner.hidden_dim(), 0.0);
    try {
        for (int ep = 0; ep < cfg.episodes; ++ep) {
            const double eps = epsilon_at(cfg, ep);
            double ret = 0.0;
            auto [h, pi] = gru_forward_step(learner, zeros_h, Vector(kFeatureDim, 0.0));
            if (task.kind == TaskKind::bandit) {
                const auto& bc = task.bandit;
                BanditState s;
                Vector state = bandit_adv_state(h, s, bc);
                for (int t = 1; t <= bc.trials; ++t) {
                    const ActionMask legal = bandit_action_mask(s, bc);
                    const int act = select_masked_action(q_values(q, state), legal, eps, explore_rng);
                    const int a = sample_action(pi);
                    const auto res = bandit_step(s, bc, allocation_from_action(act), a);
                    const double r = a == bc.target_arm ? 1.0 : 0.0;
                    ret += r;
                    std::tie(h, pi) = gru_forward_step(learner, h, encode_step_features(task, a, res.reward, res.observation, t));
                    Transition tr{state, act, r * cfg.reward_scale, {}, {}, t == bc.trials};
                    if (!tr.terminal) {
                        tr.next_state = bandit_adv_state(h, s, bc);
                        tr.next_legal = bandit_action_mask(s, bc);
                        state = tr.next_state;
                    }
                    replay.push(std::move(tr));
                    maybe_update();
                }
            } else {
                const auto& tc = task.trust;
                TrustState s;
                int invest = sample_action(pi);
                Vector state = trust_adv_state(h, s, tc, invest);
                for (int t = 1; t <= tc.rounds; ++t) {
                    const int act = select_masked_action(q_values(q, state), ActionMask(n_act, 1), eps, explore_rng);
                    const auto res = trust_step(s, tc, invest, act);
                    const bool terminal = t == tc.rounds;
                    double r = 0.0;
                    if (objective == Objective::max)
                        r = max_round_reward(invest, res.repayment_q, tc);
                    else if (terminal)
                        r = fair_terminal_reward(s, tc);
                    ret += r;
                    Transition tr{state, act, r * cfg.reward_scale, {}, {}, terminal};
                    if (!terminal) {
                        std::tie(h, pi) = gru_forward_step(
                            learner, h,
                            encode_step_features(task, invest, quarters_to_units(res.repayment_q), res.observation, t));
                        invest = sample_action(pi);
                        tr.next_state = trust_adv_state(h, s, tc, invest);
                        state = tr.next_state;
                    }
                    replay.push(std::move(tr));
                    maybe_update();
                }
            }
            out.episode_returns.push_back(ret);
            window_sum += ret;
            if (++window_n == cfg.curve_window) {
                out.curve.push_back(window_sum / window_n);
                window_sum = 0.0;
                window_n = 0;
            }
        }
    } catch (const TrainingDivergence& e) {
        out.diverged = true;
        out.divergence_reason = e.what();
    }
    if (window_n > 0) out.curve.push_back(window_sum / window_n);
    return out;
}

/// Share of smoothing windows over which the moving average of `curve` does
/// not decrease.
inline double curve_monotone_fraction(std::span<const double> curve, std::size_t window = 5) {
    if (curve.size() < window + 1) return 1.0;
    std::vector<double> smooth;
    for (std::size_t i = 0; i + window <= curve.size(); ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < window; ++k) s += curve[i + k];
        smooth.push_back(s / static_cast<double>(window));
    }
    std::size_t ok = 0;
    for (std::size_t i = 1; i < smooth.size(); ++i) ok += smooth[i] >= smooth[i - 1];
    return static_cast<double>(ok) / static_cast<double>(smooth.size() - 1);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline nlohmann::json metrics_report(const TaskSpec& task, std::span<const EpisodeLog> logs) {
    const auto done = completed(logs);
    nlohmann::json j;
    if (done.empty()) {
        j = {{"task", std::string(to_string(task.kind))}, {"episodes", 0}};
    } else if (task.kind == TaskKind::bandit) {
        j = to_json(bandit_metrics(done, task.bandit.target_arm));
    } else {
        const auto bins = investment_by_repayment(done);
        j = to_json(trust_metrics(done, task.trust), bins);
    }
    j["aborted_episodes"] = logs.size() - done.size();
    return j;
}

struct ClosedLoopResult {
    std::vector<EpisodeLog> logs;
    nlohmann::json report;
};

/// Greedy adversary against a live subject, learner in observer mode.
inline ClosedLoopResult closed_loop_run(const TaskSpec& task, const TrainedAdversary& adversary,
                                        const LearnerParams& learner, const Subject& subject, int n_episodes,
                                        std::uint64_t seed) {
    ClosedLoopResult r;
    r.logs = collect_episodes(task, subject, adversary, &learner, n_episodes, seed);
    r.report = metrics_report(task, r.logs);
    return r;
}

// ---------------------------------------------------------------------------
// Run manifest
// ---------------------------------------------------------------------------

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t tt = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

/// Config, seeds, artifact digests and phase timestamps of a run, stored as
/// JSON. Each phase appends to the same file.
class RunManifest {
public:
    RunManifest() = default;
    explicit RunManifest(std::filesystem::path path) : path_(std::move(path)) {
        if (std::filesystem::exists(path_)) {
            try {
                doc_ = nlohmann::json::parse(read_file(path_));
            } catch (const nlohmann::json::exception& e) {
                throw DataCorruption("manifest " + path_.string() + ": " + e.what());
            }
        }
        for (const char* k : {"config", "seeds", "artifacts", "phases"})
            if (!doc_.contains(k)) doc_[k] = nlohmann::json::object();
    }

    void set_config(const std::string& phase, nlohmann::json cfg) { doc_["config"][phase] = std::move(cfg); }
    void set_seed(const std::string& phase, std::uint64_t seed) { doc_["seeds"][phase] = seed; }
    void mark_phase(const std::string& phase) { doc_["phases"][phase] = utc_timestamp(); }

    void record_artifact(const std::string& name, const std::filesystem::path& p) {
        doc_["artifacts"][name] = {{"path", std::filesystem::absolute(p).string()}, {"sha256", sha256_file(p)}};
    }

    /// Names of artifacts that are missing or whose digest changed.
    std::vector<std::string> verify() const {
        std::vector<std::string> bad;
        for (const auto& [name, a] : doc_["artifacts"].items()) {
            const std::filesystem::path p = a.at("path").get<std::string>();
            if (!std::filesystem::exists(p) || sha256_file(p) != a.at("sha256").get<std::string>()) bad.push_back(name);
        }
        return bad;
    }

    const nlohmann::json& json() const { return doc_; }

    void save() const {
        if (path_.empty()) return;
        std::ofstream out(path_, std::ios::trunc);
        out << doc_.dump(2) << '\n';
    }

private:
    std::filesystem::path path_;
    nlohmann::json doc_ = nlohmann::json::object();
};

inline nlohmann::json to_json(const LearnerConfig& c) {
    return {{"hidden_dim", c.hidden_dim}, {"epochs", c.epochs}, {"patience", c.patience},
            {"batch_size", c.batch_size}, {"lr", c.lr},         {"clip", c.clip},
            {"holdout_fraction", c.holdout_fraction}, {"seed", c.seed}, {"init_scale", c.init_scale}};
}

inline nlohmann::json to_json(const LearnerReport& r) {
    nlohmann::json ep = nlohmann::json::array();
    for (const auto& e : r.epochs) ep.push_back({{"epoch", e.epoch}, {"train_nll", e.train_nll}, {"holdout_nll", e.holdout_nll}});
    return {{"epochs", ep},
            {"best_epoch", r.best_epoch},
            {"best_holdout_nll", r.best_holdout_nll},
            {"holdout_accuracy", r.holdout_accuracy},
            {"train_episodes", r.train_episodes},
            {"holdout_episodes", r.holdout_episodes}};
}

/// Phase B: train the learner and write its checkpoint (and a manifest entry
/// when a manifest is given).
inline LearnerFit fit_learner(std::span<const EpisodeLog> dataset, const TaskSpec& task, const LearnerConfig& cfg,
                              const std::filesystem::path& checkpoint_path, RunManifest* manifest = nullptr) {
    if (dataset.empty()) throw InvalidInput("fit_learner: empty dataset");
    auto fit = train_learner(dataset, task, cfg);
    if (!checkpoint_path.empty()) {
        auto ckpt = make_learner_checkpoint(fit.params, task, {{"config", to_json(cfg)}, {"report", to_json(fit.report)}});
        save_checkpoint(checkpoint_path, ckpt);
        if (manifest) {
            manifest->set_config("train-learner", to_json(cfg));
            manifest->set_seed("train-learner", cfg.seed);
            manifest->record_artifact("learner", checkpoint_path);
            manifest->mark_phase("train-learner");
            manifest->save();
        }
    }
    return fit;
}

}  // namespace advprobe
