#pragma once

// Deep Q-learning adversary over the learner model's hidden state, plus an
// exhaustive-search oracle for tiny bandit instances.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "advprobe/learner.hpp"
#include "advprobe/subjects.hpp"
#include "advprobe/tasks.hpp"

namespace advprobe {

enum class Objective { target, max, fair };

inline std::string_view to_string(Objective o) {
    switch (o) {
        case Objective::target: return "target";
        case Objective::max: return "max";
        case Objective::fair: return "fair";
    }
    return "?";
}

inline Objective parse_objective(std::string_view s) {
    if (s == "target") return Objective::target;
    if (s == "max") return Objective::max;
    if (s == "fair") return Objective::fair;
    throw InvalidInput("unknown objective '" + std::string(s) + "'");
}

inline TaskKind objective_task(Objective o) { return o == Objective::target ? TaskKind::bandit : TaskKind::trust; }

/// Legal adversary actions; nonzero = legal.
using ActionMask = std::vector<std::uint8_t>;

// ---------------------------------------------------------------------------
// Adversary state
// ---------------------------------------------------------------------------

inline constexpr std::size_t kBanditAuxDim = 3;
inline constexpr std::size_t kTrustAuxDim = 4;

inline std::size_t adv_state_dim(TaskKind k, std::size_t hidden_dim) {
    return hidden_dim + (k == TaskKind::bandit ? kBanditAuxDim : kTrustAuxDim);
}

/// [hidden, remaining target budget / budget, remaining other budget /
/// budget, trials remaining / trials]
inline Vector bandit_adv_state(std::span<const double> hidden, const BanditState& s, const BanditConfig& cfg) {
    Vector v(hidden.begin(), hidden.end());
    const double budget = cfg.budget_per_arm;
    v.push_back(budget > 0 ? (budget - s.used_target(cfg)) / budget : 0.0);
    v.push_back(budget > 0 ? (budget - s.used_other(cfg)) / budget : 0.0);
    v.push_back(static_cast<double>(cfg.trials - s.t) / cfg.trials);
    return v;
}

/// [hidden, completed rounds / rounds, investor total / scale, trustee total /
/// scale, current investment / endowment], scale = rounds*endowment*multiplier.
inline Vector trust_adv_state(std::span<const double> hidden, const TrustState& s, const TrustConfig& cfg,
                              int investment) {
    Vector v(hidden.begin(), hidden.end());
    const double scale = static_cast<double>(cfg.rounds) * cfg.endowment * cfg.multiplier;
    v.push_back(static_cast<double>(s.round) / cfg.rounds);
    v.push_back(quarters_to_units(s.investor_total_q) / scale);
    v.push_back(quarters_to_units(s.trustee_total_q) / scale);
    v.push_back(static_cast<double>(investment) / cfg.endowment);
    return v;
}

inline ActionMask bandit_action_mask(const BanditState& s, const BanditConfig& cfg) {
    const auto legal = legal_bandit_actions(s, cfg);
    return ActionMask(legal.begin(), legal.end());
}

// ---------------------------------------------------------------------------
// Q-network: in -> h1 -> h2 -> actions, ReLU on the hidden layers.
// ---------------------------------------------------------------------------

class QNetParams {
public:
    enum Block : std::size_t { W1, b1, W2, b2, W3, b3, kBlocks };
    static constexpr std::array<const char*, kBlocks> kBlockNames = {"W1", "b1", "W2", "b2", "W3", "b3"};

    QNetParams() = default;
    QNetParams(std::size_t input, std::size_t hidden1, std::size_t hidden2, std::size_t actions)
        : dims_{input, hidden1, hidden2, actions} {
        if (input == 0 || hidden1 == 0 || hidden2 == 0 || actions == 0)
            throw InvalidInput("QNetParams: dimensions must be positive");
        std::size_t off = 0;
        for (std::size_t b = 0; b < kBlocks; ++b) {
            offset_[b] = off;
            off += rows(static_cast<Block>(b)) * cols(static_cast<Block>(b));
        }
        theta_.assign(off, 0.0);
    }

    /// He-uniform weights, zero biases.
    static QNetParams random(std::size_t input, std::size_t hidden1, std::size_t hidden2, std::size_t actions,
                             Rng& rng) {
        QNetParams p(input, hidden1, hidden2, actions);
        for (Block b : {W1, W2, W3}) {
            const double bound = std::sqrt(6.0 / static_cast<double>(p.cols(b)));
            for (double& w : p.block(b)) w = rng.uniform(-bound, bound);
        }
        return p;
    }

    std::size_t input_dim() const { return dims_[0]; }
    std::size_t hidden1() const { return dims_[1]; }
    std::size_t hidden2() const { return dims_[2]; }
    std::size_t action_count() const { return dims_[3]; }
    std::size_t size() const { return theta_.size(); }

    std::size_t rows(Block b) const {
        switch (b) {
            case W1: case b1: return dims_[1];
            case W2: case b2: return dims_[2];
            default: return dims_[3];
        }
    }
    std::size_t cols(Block b) const {
        switch (b) {
            case W1: return dims_[0];
            case W2: return dims_[1];
            case W3: return dims_[2];
            default: return 1;
        }
    }

    std::span<double> flat() { return theta_; }
    std::span<const double> flat() const { return theta_; }
    std::span<double> block(Block b) { return {theta_.data() + offset_[b], rows(b) * cols(b)}; }
    std::span<const double> block(Block b) const { return {theta_.data() + offset_[b], rows(b) * cols(b)}; }
    MatrixView mat(Block b) { return {theta_.data() + offset_[b], rows(b), cols(b)}; }
    ConstMatrixView mat(Block b) const { return {theta_.data() + offset_[b], rows(b), cols(b)}; }

    QNetParams zeros_like() const { return QNetParams(dims_[0], dims_[1], dims_[2], dims_[3]); }

    bool operator==(const QNetParams& o) const { return dims_ == o.dims_ && theta_ == o.theta_; }

private:
    std::array<std::size_t, 4> dims_{};
    std::array<std::size_t, kBlocks> offset_{};
    Vector theta_;
};

namespace detail {

struct QForward {
    Vector a1, a2, q;  // post-activation hidden layers and outputs
};

inline QForward q_forward(const QNetParams& p, std::span<const double> s) {
    using B = QNetParams;
    QForward f;
    const auto b1 = p.block(B::b1), b2 = p.block(B::b2), b3 = p.block(B::b3);
    f.a1.assign(b1.begin(), b1.end());
    gemv_acc(p.mat(B::W1), s, f.a1);
    for (double& v : f.a1) v = std::max(0.0, v);
    f.a2.assign(b2.begin(), b2.end());
    gemv_acc(p.mat(B::W2), f.a1, f.a2);
    for (double& v : f.a2) v = std::max(0.0, v);
    f.q.assign(b3.begin(), b3.end());
    gemv_acc(p.mat(B::W3), f.a2, f.q);
    return f;
}

}  // namespace detail

inline Vector q_values(const QNetParams& p, std::span<const double> state) {
    if (state.size() != p.input_dim())
        throw InvalidInput("q_values: state has length " + std::to_string(state.size()) + ", expected " +
                           std::to_string(p.input_dim()));
    return detail::q_forward(p, state).q;
}

/// Epsilon-greedy over legal actions. Greedy ties go to the lowest index.
inline int select_masked_action(std::span<const double> qvals, std::span<const std::uint8_t> legal, double epsilon,
                                Rng& rng) {
    if (qvals.size() != legal.size()) throw InvalidInput("select_masked_action: mask/value length mismatch");
    std::vector<int> ok;
    for (std::size_t i = 0; i < legal.size(); ++i)
        if (legal[i]) ok.push_back(static_cast<int>(i));
    if (ok.empty()) throw ConstraintViolation("select_masked_action: no legal action");
    if (epsilon > 0.0 && rng.uniform() < epsilon) return ok[rng.below(ok.size())];
    int best = ok.front();
    for (int a : ok)
        if (qvals[a] > qvals[best]) best = a;
    return best;
}

// ---------------------------------------------------------------------------
// Replay + update
// ---------------------------------------------------------------------------

struct Transition {
    Vector state;
    int action = 0;
    double reward = 0.0;
    Vector next_state;
    ActionMask next_legal;  // legal actions in next_state; empty means all
    bool terminal = false;
};

class ReplayBuffer {
public:
    explicit ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw InvalidInput("ReplayBuffer: capacity must be positive");
        items_.reserve(std::min<std::size_t>(capacity, 1 << 16));
    }

    void push(Transition t) {
        if (items_.size() < capacity_) {
            items_.push_back(std::move(t));
        } else {
            items_[head_] = std::move(t);
            head_ = (head_ + 1) % capacity_;
        }
    }

    std::size_t size() const { return items_.size(); }
    std::size_t capacity() const { return capacity_; }

    /// i-th oldest transition still held.
    const Transition& at(std::size_t i) const { return items_[(head_ + i) % items_.size()]; }

    std::vector<const Transition*> sample(std::size_t n, Rng& rng) const {
        if (items_.empty()) throw InvalidInput("ReplayBuffer::sample: buffer is empty");
        std::vector<const Transition*> out;
        out.reserve(n);
        for (std::size_t i = 0; i < n; ++i) out.push_back(&items_[rng.below(items_.size())]);
        return out;
    }

private:
    std::size_t capacity_;
    std::size_t head_ = 0;  // oldest element once full
    std::vector<Transition> items_;
};

inline double huber(double x, double delta = 1.0) {
    const double a = std::abs(x);
    return a <= delta ? 0.5 * x * x : delta * (a - 0.5 * delta);
}

struct DqnUpdateResult {
    double loss = 0.0;
    double grad_norm = 0.0;
};

/// TD target for one transition: r if terminal, else r + gamma * max over
/// legal next actions of the target network.
inline double td_target(const QNetParams& target, const Transition& t, double gamma) {
    if (t.terminal) return t.reward;
    const Vector q = q_values(target, t.next_state);
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < q.size(); ++a)
        if (t.next_legal.empty() || t.next_legal[a]) best = std::max(best, q[a]);
    if (!std::isfinite(best)) throw TrainingDivergence("td_target: no legal next action or non-finite value");
    return t.reward + gamma * best;
}

/// One Adam step on mean Huber(y - Q(s,a)). `target` is read only.
inline DqnUpdateResult dqn_update(QNetParams& params, const QNetParams& target,
                                  std::span<const Transition* const> batch, double gamma, AdamState& opt,
                                  double grad_clip = 10.0) {
    using B = QNetParams;
    if (batch.empty()) throw InvalidInput("dqn_update: empty batch");
    QNetParams g = params.zeros_like();
    const double inv_n = 1.0 / static_cast<double>(batch.size());
    DqnUpdateResult res;
    Vector d3(params.action_count()), d2(params.hidden2()), d1(params.hidden1());
    for (const Transition* t : batch) {
        const double y = td_target(target, *t, gamma);
        if (!std::isfinite(y)) throw TrainingDivergence("dqn_update: non-finite TD target");
        if (t->state.size() != params.input_dim()) throw InvalidInput("dqn_update: state dimension mismatch");
        const auto f = detail::q_forward(params, t->state);
        const double err = f.q[t->action] - y;
        res.loss += huber(err) * inv_n;
        std::fill(d3.begin(), d3.end(), 0.0);
        d3[t->action] = std::clamp(err, -1.0, 1.0) * inv_n;
        ger_acc(g.mat(B::W3), d3, f.a2);
        g.block(B::b3)[t->action] += d3[t->action];
        std::fill(d2.begin(), d2.end(), 0.0);
        gemv_t_acc(params.mat(B::W3), d3, d2);
        for (std::size_t i = 0; i < d2.size(); ++i)
            if (f.a2[i] <= 0.0) d2[i] = 0.0;
        ger_acc(g.mat(B::W2), d2, f.a1);
        for (std::size_t i = 0; i < d2.size(); ++i) g.block(B::b2)[i] += d2[i];
        std::fill(d1.begin(), d1.end(), 0.0);
        gemv_t_acc(params.mat(B::W2), d2, d1);
        for (std::size_t i = 0; i < d1.size(); ++i)
            if (f.a1[i] <= 0.0) d1[i] = 0.0;
        ger_acc(g.mat(B::W1), d1, t->state);
        for (std::size_t i = 0; i < d1.size(); ++i) g.block(B::b1)[i] += d1[i];
    }
    if (!std::isfinite(res.loss)) throw TrainingDivergence("dqn_update: non-finite loss");
    res.grad_norm = clip_by_norm(g.flat(), grad_clip);
    adam_step(params.flat(), g.flat(), opt);
    return res;
}

// ---------------------------------------------------------------------------
// Exhaustive oracle
// ---------------------------------------------------------------------------

struct OracleResult {
    int best_target_choices = 0;
    std::vector<Allocation> best_sequence;
};

/// Maximum number of target choices any legal allocation schedule can extract
/// from a deterministic subject, by depth-first search over all schedules.
inline OracleResult brute_force_oracle(const BanditConfig& cfg, const Subject& subject) {
    cfg.validate();
    if (cfg.trials > 8) throw InvalidInput("brute_force_oracle: at most 8 trials");
    if (!subject.deterministic()) throw InvalidInput("brute_force_oracle: subject must be deterministic");

    OracleResult best{-1, {}};
    std::vector<Allocation> path;
    Rng unused(0);

    std::function<void(const BanditState&, const Subject&, const Feedback&, int)> dfs =
        [&](const BanditState& s, const Subject& subj, const Feedback& fb, int count) {
            if (s.done(cfg)) {
                if (count > best.best_target_choices) best = {count, path};
                return;
            }
            auto mover = subj.clone();
            const int action = mover->act(fb, unused);
            const auto legal = legal_bandit_actions(s, cfg);
            for (int a = 0; a < kBanditAdversaryActions; ++a) {
                if (!legal[a]) continue;
                BanditState next = s;
                const Allocation alloc = allocation_from_action(a);
                const auto step = bandit_step(next, cfg, alloc, action);
                path.push_back(alloc);
                dfs(next, *mover, Feedback{next.t + 1, action, static_cast<double>(step.reward), step.observation},
                    count + (action == cfg.target_arm ? 1 : 0));
                path.pop_back();
            }
        };

    auto start = subject.clone();
    start->reset();
    dfs(BanditState{}, *start, Feedback{}, 0);
    return best;
}

}  // namespace advprobe
