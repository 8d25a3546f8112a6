#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "advprobe/tasks.hpp"

namespace advprobe {

/// One trial (bandit) or round (trust) of a subject run.
struct TrialRecord {
    int t = 0;           // 1-based
    int action = 0;      // arm, or investment
    double reward = 0;   // bandit payout, or repayment in units
    Observation observation;
    Allocation allocation{};   // bandit only
    int repay_action = 0;      // trust only
    std::int64_t repayment_q = 0;  // trust only
    Vector hidden;             // learner state the adversary saw; empty if none
};

struct EpisodeLog {
    TaskKind task = TaskKind::bandit;
    std::string subject;
    int episode = 0;
    std::uint64_t seed = 0;
    std::vector<TrialRecord> trials;
    bool aborted = false;
    std::string abort_reason;
};

/// Learner inputs for every step of an episode: step t sees the action,
/// reward and observation of step t-1.
inline std::vector<Vector> episode_features(const TaskSpec& task, const EpisodeLog& log) {
    std::vector<Vector> out;
    out.reserve(log.trials.size());
    std::optional<int> prev_action;
    double prev_reward = 0.0;
    Observation prev_obs;
    for (std::size_t i = 0; i < log.trials.size(); ++i) {
        out.push_back(encode_step_features(task, prev_action, prev_reward, prev_obs, static_cast<int>(i)));
        const auto& r = log.trials[i];
        prev_action = r.action;
        prev_reward = r.reward;
        prev_obs = r.observation;
    }
    return out;
}

inline std::vector<int> episode_actions(const EpisodeLog& log) {
    std::vector<int> a;
    a.reserve(log.trials.size());
    for (const auto& r : log.trials) a.push_back(r.action);
    return a;
}

/// Re-runs a log through the task state machines. Throws DataCorruption if
/// any recorded reward, repayment or total disagrees with the replay.
inline void replay_episode(const TaskSpec& task, const EpisodeLog& log) {
    auto fail = [&](int t, const std::string& what) {
        throw DataCorruption("episode " + std::to_string(log.episode) + " trial " + std::to_string(t) + ": " +
                             what);
    };
    int expected_t = 1;
    if (task.kind == TaskKind::bandit) {
        BanditState s;
        for (const auto& r : log.trials) {
            if (r.t != expected_t++) fail(r.t, "trial indices not contiguous");
            BanditStepResult res;
            try {
                res = bandit_step(s, task.bandit, r.allocation, r.action);
            } catch (const Error& e) {
                fail(r.t, e.what());
            }
            if (res.reward != r.reward) fail(r.t, "reward inconsistent with allocation");
        }
    } else {
        TrustState s;
        for (const auto& r : log.trials) {
            if (r.t != expected_t++) fail(r.t, "round indices not contiguous");
            TrustStepResult res;
            try {
                res = trust_step(s, task.trust, r.action, r.repay_action);
            } catch (const Error& e) {
                fail(r.t, e.what());
            }
            if (res.repayment_q != r.repayment_q) fail(r.t, "repayment inconsistent with repay action");
            if (const auto* o = std::get_if<TrustObservation>(&r.observation)) {
                if (o->investor_total_q != s.investor_total_q || o->trustee_total_q != s.trustee_total_q)
                    fail(r.t, "running totals violate conservation");
            }
        }
    }
}

}  // namespace advprobe
