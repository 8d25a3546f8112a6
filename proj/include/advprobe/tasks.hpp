#pragma once

// The two environments: a two-armed bandit whose rewards are allocated by an
// adversary under per-arm budgets, and the multi-round trust task (MRTT).

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "advprobe/errors.hpp"
#include "advprobe/numerics.hpp"

namespace advprobe {

enum class TaskKind { bandit, trust };

inline std::string_view to_string(TaskKind k) { return k == TaskKind::bandit ? "bandit" : "trust"; }

inline TaskKind parse_task(std::string_view s) {
    if (s == "bandit") return TaskKind::bandit;
    if (s == "trust" || s == "mrtt") return TaskKind::trust;
    throw InvalidInput("unknown task '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Bandit
// ---------------------------------------------------------------------------

struct BanditConfig {
    int trials = 100;
    int budget_per_arm = 25;
    int target_arm = 0;
    double reward_prob_random = 0.25;

    int other_arm() const { return 1 - target_arm; }

    void validate() const {
        if (trials <= 0) throw InvalidInput("bandit: trials must be positive");
        if (budget_per_arm < 0 || 2 * budget_per_arm > trials)
            throw InvalidInput("bandit: need 0 <= 2*budget_per_arm <= trials");
        if (target_arm != 0 && target_arm != 1) throw InvalidInput("bandit: target arm must be 0 or 1");
        if (!(reward_prob_random >= 0.0 && reward_prob_random <= 1.0))
            throw InvalidInput("bandit: reward_prob_random outside [0,1]");
    }
};

/// Potential reward per arm for one trial, indexed by arm.
using Allocation = std::array<bool, 2>;

enum class ArmStatus { free, forbidden, forced };

struct BanditTrial {
    Allocation allocation{};
    int action = 0;
    int reward = 0;
};

struct BanditState {
    int t = 0;                 // completed trials
    std::array<int, 2> used{};  // allocations consumed, indexed by arm
    std::vector<BanditTrial> history;

    int used_target(const BanditConfig& cfg) const { return used[cfg.target_arm]; }
    int used_other(const BanditConfig& cfg) const { return used[cfg.other_arm()]; }
    bool done(const BanditConfig& cfg) const { return t >= cfg.trials; }
};

/// Per-arm allocation status: forbidden once the budget is spent, forced once
/// the remaining budget equals the remaining trials.
inline std::array<ArmStatus, 2> bandit_allocation_mask(const BanditState& s, const BanditConfig& cfg) {
    std::array<ArmStatus, 2> mask{};
    const int left = cfg.trials - s.t;
    for (int arm = 0; arm < 2; ++arm) {
        const int remaining = cfg.budget_per_arm - s.used[arm];
        if (remaining <= 0)
            mask[arm] = ArmStatus::forbidden;
        else if (remaining >= left)
            mask[arm] = ArmStatus::forced;
        else
            mask[arm] = ArmStatus::free;
    }
    return mask;
}

inline bool allocation_allowed(const std::array<ArmStatus, 2>& mask, const Allocation& alloc) {
    for (int arm = 0; arm < 2; ++arm) {
        if (mask[arm] == ArmStatus::forbidden && alloc[arm]) return false;
        if (mask[arm] == ArmStatus::forced && !alloc[arm]) return false;
    }
    return true;
}

/// The four adversary actions of the bandit: bit 0 allocates arm 0, bit 1 arm 1.
inline constexpr int kBanditAdversaryActions = 4;

inline Allocation allocation_from_action(int action) {
    if (action < 0 || action >= kBanditAdversaryActions)
        throw InvalidInput("bandit adversary action out of range: " + std::to_string(action));
    return {(action & 1) != 0, (action & 2) != 0};
}

inline int action_from_allocation(const Allocation& a) { return (a[0] ? 1 : 0) | (a[1] ? 2 : 0); }

inline std::array<bool, kBanditAdversaryActions> legal_bandit_actions(const BanditState& s,
                                                                        const BanditConfig& cfg) {
    const auto mask = bandit_allocation_mask(s, cfg);
    std::array<bool, kBanditAdversaryActions> legal{};
    for (int a = 0; a < kBanditAdversaryActions; ++a) legal[a] = allocation_allowed(mask, allocation_from_action(a));
    return legal;
}

struct BanditObservation {
    int outcome = 0;  // 1 when the chosen arm paid out
};

struct TrustObservation {
    int repay_action = 0;
    double repay_fraction = 0.0;
    std::int64_t received_q = 0;   // multiplier * investment, quarter-units
    std::int64_t repayment_q = 0;
    std::int64_t investor_total_q = 0;
    std::int64_t trustee_total_q = 0;
};

/// What the subject sees after a step. `monostate` before the first step.
using Observation = std::variant<std::monostate, BanditObservation, TrustObservation>;

struct BanditStepResult {
    int reward = 0;
    Observation observation;
};

/// Applies one trial. Budget counts allocations on both arms whether or not
/// the subject picks them.
inline BanditStepResult bandit_step(BanditState& s, const BanditConfig& cfg, const Allocation& alloc,
                                    int action) {
    if (s.done(cfg)) throw ConstraintViolation("bandit: episode already finished");
    if (action != 0 && action != 1) throw InvalidInput("bandit: action must be 0 or 1");
    if (!allocation_allowed(bandit_allocation_mask(s, cfg), alloc))
        throw ConstraintViolation("bandit: allocation violates the budget mask at trial " +
                                  std::to_string(s.t + 1));
    const int reward = alloc[action] ? 1 : 0;
    for (int arm = 0; arm < 2; ++arm)
        if (alloc[arm]) ++s.used[arm];
    ++s.t;
    s.history.push_back({alloc, action, reward});
    return {reward, BanditObservation{reward}};
}

/// Baseline adversary: each arm gets an independent Bernoulli(p) draw, then
/// the mask overrides it. Both draws are always consumed.
inline Allocation random_bandit_allocation(const BanditState& s, const BanditConfig& cfg, Rng& rng) {
    const auto mask = bandit_allocation_mask(s, cfg);
    Allocation alloc{};
    for (int arm = 0; arm < 2; ++arm) {
        const bool draw = rng.bernoulli(cfg.reward_prob_random);
        alloc[arm] = mask[arm] == ArmStatus::forced ? true : mask[arm] == ArmStatus::forbidden ? false : draw;
    }
    return alloc;
}

// ---------------------------------------------------------------------------
// Multi-round trust task. Money is tracked in integer quarter-units.
// ---------------------------------------------------------------------------

struct TrustConfig {
    int rounds = 10;
    int endowment = 20;
    int multiplier = 3;
    std::vector<int> repay_quarters = {0, 1, 2, 3, 4};  // repay fraction = q / 4

    int repay_actions() const { return static_cast<int>(repay_quarters.size()); }
    double repay_fraction(int action) const { return repay_quarters.at(action) / 4.0; }

    void validate() const {
        if (rounds <= 0) throw InvalidInput("trust: rounds must be positive");
        if (endowment <= 0) throw InvalidInput("trust: endowment must be positive");
        if (multiplier < 1) throw InvalidInput("trust: multiplier must be >= 1");
        if (repay_quarters.empty()) throw InvalidInput("trust: no repay actions");
        for (std::size_t i = 0; i < repay_quarters.size(); ++i) {
            if (repay_quarters[i] < 0 || repay_quarters[i] > 4)
                throw InvalidInput("trust: repay fractions must lie in [0,1]");
            if (i > 0 && repay_quarters[i] < repay_quarters[i - 1])
                throw InvalidInput("trust: repay fractions must be sorted");
        }
    }
};

struct TrustRound {
    int investment = 0;
    int repay_action = 0;
    std::int64_t repayment_q = 0;
};

struct TrustState {
    int round = 0;  // completed rounds
    std::int64_t investor_total_q = 0;
    std::int64_t trustee_total_q = 0;
    std::vector<TrustRound> history;

    bool done(const TrustConfig& cfg) const { return round >= cfg.rounds; }
};

struct TrustStepResult {
    std::int64_t repayment_q = 0;
    Observation observation;
};

inline TrustStepResult trust_step(TrustState& s, const TrustConfig& cfg, int investment, int repay_action) {
    if (s.done(cfg)) throw ConstraintViolation("trust: episode already finished");
    if (investment < 0 || investment > cfg.endowment)
        throw InvalidInput("trust: investment must be in 0.." + std::to_string(cfg.endowment) + ", got " +
                           std::to_string(investment));
    if (repay_action < 0 || repay_action >= cfg.repay_actions())
        throw InvalidInput("trust: repay action must be in 0.." + std::to_string(cfg.repay_actions() - 1));
    const std::int64_t received_q = 4LL * cfg.multiplier * investment;
    const std::int64_t repayment_q = static_cast<std::int64_t>(cfg.repay_quarters[repay_action]) *
                                     cfg.multiplier * investment;
    s.investor_total_q += 4LL * (cfg.endowment - investment) + repayment_q;
    s.trustee_total_q += received_q - repayment_q;
    ++s.round;
    s.history.push_back({investment, repay_action, repayment_q});
    TrustObservation obs{repay_action,      cfg.repay_fraction(repay_action), received_q, repayment_q,
                         s.investor_total_q, s.trustee_total_q};
    return {repayment_q, obs};
}

/// investor_total + trustee_total expected from the investments alone.
inline std::int64_t trust_conserved_total_q(const TrustConfig& cfg, std::span<const TrustRound> rounds) {
    std::int64_t total = 0;
    for (const auto& r : rounds) total += 4LL * (cfg.endowment + (cfg.multiplier - 1) * r.investment);
    return total;
}

inline double quarters_to_units(std::int64_t q) { return static_cast<double>(q) / 4.0; }

// ---------------------------------------------------------------------------
// Task bundle + learner input features
// ---------------------------------------------------------------------------

struct TaskSpec {
    TaskKind kind = TaskKind::bandit;
    BanditConfig bandit;
    TrustConfig trust;

    int horizon() const { return kind == TaskKind::bandit ? bandit.trials : trust.rounds; }
    /// Number of actions available to the subject.
    int action_dim() const { return kind == TaskKind::bandit ? 2 : trust.endowment + 1; }
    /// Number of actions available to the adversary.
    int adversary_actions() const {
        return kind == TaskKind::bandit ? kBanditAdversaryActions : trust.repay_actions();
    }
    void validate() const { kind == TaskKind::bandit ? bandit.validate() : trust.validate(); }
};

inline constexpr std::size_t kFeatureDim = 3;

/// Learner input for the step that predicts the next action.
///  bandit: [one-hot previous arm (2), previous reward]
///  trust:  [previous investment / endowment, previous repayment / amount
///           received, completed rounds / rounds]
/// `prev_action` is empty on the first step, which encodes to zeros.
inline Vector encode_step_features(const TaskSpec& task, std::optional<int> prev_action, double prev_reward,
                                   const Observation& obs, int completed_steps) {
    Vector f(kFeatureDim, 0.0);
    switch (task.kind) {
        case TaskKind::bandit:
            if (prev_action) {
                if (*prev_action != 0 && *prev_action != 1) throw InvalidInput("bandit feature: bad action");
                f[*prev_action] = 1.0;
                f[2] = prev_reward;
            }
            return f;
        case TaskKind::trust: {
            if (!prev_action) return f;
            f[0] = static_cast<double>(*prev_action) / task.trust.endowment;
            if (const auto* t = std::get_if<TrustObservation>(&obs); t && t->received_q > 0)
                f[1] = static_cast<double>(t->repayment_q) / static_cast<double>(t->received_q);
            f[2] = static_cast<double>(completed_steps) / task.trust.rounds;
            return f;
        }
    }
    throw InvalidInput("encode_step_features: unknown task");
}

}  // namespace advprobe
