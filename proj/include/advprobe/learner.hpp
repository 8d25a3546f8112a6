#pragma once

// Recurrent model of a subject's choices: a gated recurrent cell followed by
// a softmax head. Trained on episode logs with backpropagation through time.
//
//   z  = logistic(Wz x + Uz h + bz)          update gate
//   r  = logistic(Wr x + Ur h + br)          reset gate
//   c  = tanh(Wc x + Uc (r * h) + bc)        candidate
//   h' = (1 - z) * h + z * c
//   pi = softmax(Wo h' + bo)

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "advprobe/episode.hpp"
#include "advprobe/numerics.hpp"

namespace advprobe {

using HiddenState = Vector;
using PolicyDistribution = Vector;

class LearnerParams {
public:
    enum Block : std::size_t { Wz, Uz, bz, Wr, Ur, br, Wc, Uc, bc, Wo, bo, kBlocks };

    static constexpr std::array<const char*, kBlocks> kBlockNames = {
        "W_update", "U_update", "b_update", "W_reset", "U_reset", "b_reset",
        "W_cand",   "U_cand",   "b_cand",   "W_out",   "b_out"};

    LearnerParams() = default;
    LearnerParams(std::size_t input_dim, std::size_t hidden_dim, std::size_t action_dim)
        : in_(input_dim), hid_(hidden_dim), act_(action_dim) {
        if (input_dim == 0 || hidden_dim == 0 || action_dim == 0)
            throw InvalidInput("LearnerParams: dimensions must be positive");
        std::size_t off = 0;
        for (std::size_t b = 0; b < kBlocks; ++b) {
            offset_[b] = off;
            off += rows(static_cast<Block>(b)) * cols(static_cast<Block>(b));
        }
        theta_.assign(off, 0.0);
    }

    /// Weights uniform in [-scale, scale], biases zero.
    static LearnerParams random(std::size_t input_dim, std::size_t hidden_dim, std::size_t action_dim, Rng& rng,
                                double scale = 0.1) {
        LearnerParams p(input_dim, hidden_dim, action_dim);
        for (std::size_t b = 0; b < kBlocks; ++b) {
            if (is_bias(static_cast<Block>(b))) continue;
            for (double& w : p.block(static_cast<Block>(b))) w = rng.uniform(-scale, scale);
        }
        return p;
    }

    std::size_t input_dim() const { return in_; }
    std::size_t hidden_dim() const { return hid_; }
    std::size_t action_dim() const { return act_; }
    std::size_t size() const { return theta_.size(); }

    std::span<double> flat() { return theta_; }
    std::span<const double> flat() const { return theta_; }

    static bool is_bias(Block b) { return b == bz || b == br || b == bc || b == bo; }

    std::size_t rows(Block b) const { return b == Wo || b == bo ? act_ : hid_; }
    std::size_t cols(Block b) const {
        switch (b) {
            case Wz: case Wr: case Wc: return in_;
            case Uz: case Ur: case Uc: case Wo: return hid_;
            default: return 1;
        }
    }

    std::span<double> block(Block b) { return {theta_.data() + offset_[b], rows(b) * cols(b)}; }
    std::span<const double> block(Block b) const { return {theta_.data() + offset_[b], rows(b) * cols(b)}; }
    MatrixView mat(Block b) { return {theta_.data() + offset_[b], rows(b), cols(b)}; }
    ConstMatrixView mat(Block b) const { return {theta_.data() + offset_[b], rows(b), cols(b)}; }

    /// Same layout, used to hold gradients.
    LearnerParams zeros_like() const { return LearnerParams(in_, hid_, act_); }

    bool operator==(const LearnerParams& o) const {
        return in_ == o.in_ && hid_ == o.hid_ && act_ == o.act_ && theta_ == o.theta_;
    }

private:
    std::size_t in_ = 0, hid_ = 0, act_ = 0;
    std::array<std::size_t, kBlocks> offset_{};
    Vector theta_;
};

namespace detail {

struct GruCache {
    Vector x, h_prev, z, r, rh, c, h;
};

inline void check_step_dims(const LearnerParams& p, std::span<const double> h, std::span<const double> x) {
    if (h.size() != p.hidden_dim())
        throw InvalidInput("learner: hidden state has length " + std::to_string(h.size()) + ", expected " +
                           std::to_string(p.hidden_dim()));
    if (x.size() != p.input_dim())
        throw InvalidInput("learner: features have length " + std::to_string(x.size()) + ", expected " +
                           std::to_string(p.input_dim()));
}

inline void gru_cell(const LearnerParams& p, std::span<const double> h, std::span<const double> x, GruCache& c) {
    using B = LearnerParams;
    const std::size_t H = p.hidden_dim();
    c.x.assign(x.begin(), x.end());
    c.h_prev.assign(h.begin(), h.end());
    const auto bz = p.block(B::bz), br = p.block(B::br), bc = p.block(B::bc);
    c.z.assign(bz.begin(), bz.end());
    c.r.assign(br.begin(), br.end());
    c.c.assign(bc.begin(), bc.end());
    gemv_acc(p.mat(B::Wz), x, c.z);
    gemv_acc(p.mat(B::Uz), h, c.z);
    gemv_acc(p.mat(B::Wr), x, c.r);
    gemv_acc(p.mat(B::Ur), h, c.r);
    c.rh.resize(H);
    for (std::size_t i = 0; i < H; ++i) {
        c.z[i] = logistic(c.z[i]);
        c.r[i] = logistic(c.r[i]);
        c.rh[i] = c.r[i] * h[i];
    }
    gemv_acc(p.mat(B::Wc), x, c.c);
    gemv_acc(p.mat(B::Uc), c.rh, c.c);
    c.h.resize(H);
    for (std::size_t i = 0; i < H; ++i) {
        c.c[i] = std::tanh(c.c[i]);
        c.h[i] = (1.0 - c.z[i]) * h[i] + c.z[i] * c.c[i];
    }
}

inline Vector policy_logits(const LearnerParams& p, std::span<const double> h) {
    const auto bo = p.block(LearnerParams::bo);
    Vector logits(bo.begin(), bo.end());
    gemv_acc(p.mat(LearnerParams::Wo), h, logits);
    return logits;
}

}  // namespace detail

/// One recurrence step plus the policy head's prediction of the next action.
inline std::pair<HiddenState, PolicyDistribution> gru_forward_step(const LearnerParams& p,
                                                                   std::span<const double> h,
                                                                   std::span<const double> features) {
    detail::check_step_dims(p, h, features);
    detail::GruCache c;
    detail::gru_cell(p, h, features, c);
    auto policy = softmax(detail::policy_logits(p, c.h));
    return {std::move(c.h), std::move(policy)};
}

/// Observer mode: the same recurrence driven by what the subject actually
/// did; the policy head is not evaluated.
inline HiddenState observe_action(const LearnerParams& p, std::span<const double> h,
                                  std::span<const double> features) {
    detail::check_step_dims(p, h, features);
    detail::GruCache c;
    detail::gru_cell(p, h, features, c);
    return std::move(c.h);
}

struct NllResult {
    double loss = 0.0;  // mean negative log-likelihood per step
    Vector grad;        // d loss / d theta, same layout as LearnerParams::flat()
    std::size_t correct = 0;  // steps where argmax(pi) == action
};

/// Mean next-action NLL over one episode and its gradient by BPTT.
inline NllResult sequence_nll(const LearnerParams& p, std::span<const Vector> features, std::span<const int> actions,
                              bool with_grad = true) {
    using B = LearnerParams;
    if (features.empty()) throw InvalidInput("sequence_nll: empty episode");
    if (features.size() != actions.size()) throw InvalidInput("sequence_nll: features/actions length mismatch");
    const std::size_t T = features.size(), H = p.hidden_dim(), A = p.action_dim();

    std::vector<detail::GruCache> cache(T);
    std::vector<Vector> probs(T);
    NllResult out;
    Vector h(H, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const int a = actions[t];
        if (a < 0 || static_cast<std::size_t>(a) >= A)
            throw DataCorruption("sequence_nll: action " + std::to_string(a) + " at step " + std::to_string(t + 1) +
                                 " outside 0.." + std::to_string(A - 1));
        detail::check_step_dims(p, h, features[t]);
        detail::gru_cell(p, h, features[t], cache[t]);
        const Vector logits = detail::policy_logits(p, cache[t].h);
        const double mx = *std::max_element(logits.begin(), logits.end());
        double lse = 0.0;
        for (double l : logits) lse += std::exp(l - mx);
        lse = mx + std::log(lse);
        out.loss -= logits[a] - lse;
        probs[t].resize(A);
        for (std::size_t k = 0; k < A; ++k) probs[t][k] = std::exp(logits[k] - lse);
        if (static_cast<std::size_t>(std::max_element(probs[t].begin(), probs[t].end()) - probs[t].begin()) ==
            static_cast<std::size_t>(a))
            ++out.correct;
        h = cache[t].h;
    }
    const double inv_t = 1.0 / static_cast<double>(T);
    out.loss *= inv_t;
    if (!with_grad) return out;

    LearnerParams g = p.zeros_like();
    Vector dh_next(H, 0.0), dh(H), dlogits(A), da_z(H), da_r(H), da_c(H), drh(H);
    for (std::size_t t = T; t-- > 0;) {
        const auto& c = cache[t];
        for (std::size_t k = 0; k < A; ++k) dlogits[k] = probs[t][k] * inv_t;
        dlogits[actions[t]] -= inv_t;
        ger_acc(g.mat(B::Wo), dlogits, c.h);
        for (std::size_t k = 0; k < A; ++k) g.block(B::bo)[k] += dlogits[k];
        dh = dh_next;
        gemv_t_acc(p.mat(B::Wo), dlogits, dh);

        std::fill(dh_next.begin(), dh_next.end(), 0.0);
        for (std::size_t i = 0; i < H; ++i) {
            const double dz = dh[i] * (c.c[i] - c.h_prev[i]);
            const double dc = dh[i] * c.z[i];
            dh_next[i] = dh[i] * (1.0 - c.z[i]);
            da_z[i] = dz * c.z[i] * (1.0 - c.z[i]);
            da_c[i] = dc * (1.0 - c.c[i] * c.c[i]);
        }
        ger_acc(g.mat(B::Wc), da_c, c.x);
        ger_acc(g.mat(B::Uc), da_c, c.rh);
        std::fill(drh.begin(), drh.end(), 0.0);
        gemv_t_acc(p.mat(B::Uc), da_c, drh);
        for (std::size_t i = 0; i < H; ++i) {
            g.block(B::bc)[i] += da_c[i];
            dh_next[i] += drh[i] * c.r[i];
            const double dr = drh[i] * c.h_prev[i];
            da_r[i] = dr * c.r[i] * (1.0 - c.r[i]);
            g.block(B::br)[i] += da_r[i];
            g.block(B::bz)[i] += da_z[i];
        }
        ger_acc(g.mat(B::Wr), da_r, c.x);
        ger_acc(g.mat(B::Ur), da_r, c.h_prev);
        ger_acc(g.mat(B::Wz), da_z, c.x);
        ger_acc(g.mat(B::Uz), da_z, c.h_prev);
        gemv_t_acc(p.mat(B::Ur), da_r, dh_next);
        gemv_t_acc(p.mat(B::Uz), da_z, dh_next);
    }
    out.grad.assign(g.flat().begin(), g.flat().end());
    return out;
}

inline NllResult sequence_nll(const LearnerParams& p, const TaskSpec& task, const EpisodeLog& episode,
                              bool with_grad = true) {
    const auto f = episode_features(task, episode);
    const auto a = episode_actions(episode);
    return sequence_nll(p, f, a, with_grad);
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct LearnerConfig {
    std::size_t hidden_dim = 10;
    int epochs = 200;
    int patience = 20;  // epochs without held-out improvement before stopping
    std::size_t batch_size = 16;
    double lr = 1e-3;
    double clip = 5.0;
    double holdout_fraction = 0.1;
    std::uint64_t seed = 0;
    double init_scale = 0.1;
};

struct EpochStats {
    int epoch = 0;
    double train_nll = 0.0;
    double holdout_nll = 0.0;
};

struct LearnerReport {
    std::vector<EpochStats> epochs;
    int best_epoch = 0;
    double best_holdout_nll = 0.0;
    double holdout_accuracy = 0.0;
    std::size_t train_episodes = 0;
    std::size_t holdout_episodes = 0;
    double max_applied_grad_norm = 0.0;
};

struct LearnerFit {
    LearnerParams params;
    LearnerReport report;
};

struct PreparedEpisode {
    std::vector<Vector> features;
    std::vector<int> actions;
};

/// Per-step mean NLL and argmax accuracy over a set of episodes.
inline std::pair<double, double> evaluate_learner(const LearnerParams& p, std::span<const PreparedEpisode> eps) {
    double nll = 0.0;
    std::size_t steps = 0, correct = 0;
    for (const auto& e : eps) {
        const auto r = sequence_nll(p, e.features, e.actions, false);
        nll += r.loss * static_cast<double>(e.actions.size());
        steps += e.actions.size();
        correct += r.correct;
    }
    if (steps == 0) return {0.0, 0.0};
    return {nll / static_cast<double>(steps), static_cast<double>(correct) / static_cast<double>(steps)};
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

/// Minibatch Adam on mean sequence NLL with gradient-norm clipping. Keeps the
/// parameters of the epoch with the lowest held-out NLL.
inline LearnerFit train_learner(std::span<const EpisodeLog> dataset, const TaskSpec& task, const LearnerConfig& cfg) {
    std::vector<PreparedEpisode> eps;
    for (const auto& e : dataset) {
        if (e.task != task.kind) throw InvalidInput("train_learner: dataset mixes tasks");
        if (e.aborted || e.trials.empty()) continue;
        eps.push_back({episode_features(task, e), episode_actions(e)});
    }
    if (eps.size() < 2) throw InvalidInput("train_learner: need at least two complete episodes");
    if (cfg.batch_size == 0 || cfg.epochs <= 0) throw InvalidInput("train_learner: bad batch size or epochs");

    Rng data_rng = stream(cfg.seed, Stream::data);
    Rng init_rng = stream(cfg.seed, Stream::init);

    std::vector<std::size_t> order(eps.size());
    std::iota(order.begin(), order.end(), 0);
    shuffle_indices(order, data_rng);
    std::size_t n_hold = static_cast<std::size_t>(std::ceil(cfg.holdout_fraction * static_cast<double>(eps.size())));
    n_hold = std::min(n_hold, eps.size() - 1);
    std::vector<PreparedEpisode> holdout, train;
    for (std::size_t i = 0; i < order.size(); ++i) (i < n_hold ? holdout : train).push_back(std::move(eps[order[i]]));

    LearnerFit fit{LearnerParams::random(kFeatureDim, cfg.hidden_dim, static_cast<std::size_t>(task.action_dim()),
                                         init_rng, cfg.init_scale),
                   {}};
    fit.report.train_episodes = train.size();
    fit.report.holdout_episodes = holdout.size();
    const auto& selection_set = holdout.empty() ? train : holdout;

    LearnerParams params = fit.params;
    AdamState adam(params.size(), cfg.lr);
    Vector grad(params.size());
    std::vector<std::size_t> train_idx(train.size());
    std::iota(train_idx.begin(), train_idx.end(), 0);

    double best = evaluate_learner(params, selection_set).first;
    fit.report.best_holdout_nll = best;
    int since_best = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        shuffle_indices(train_idx, data_rng);
        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(train_idx.size(), start + cfg.batch_size);
            std::fill(grad.begin(), grad.end(), 0.0);
            double batch_loss = 0.0;
            for (std::size_t i = start; i < end; ++i) {
                const auto& e = train[train_idx[i]];
                const auto r = sequence_nll(params, e.features, e.actions);
                batch_loss += r.loss;
                for (std::size_t k = 0; k < grad.size(); ++k) grad[k] += r.grad[k];
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (double& g : grad) g *= inv;
            if (!all_finite(grad)) throw TrainingDivergence("train_learner: non-finite gradient");
            clip_by_norm(grad, cfg.clip);
            fit.report.max_applied_grad_norm = std::max(fit.report.max_applied_grad_norm, l2_norm(grad));
            adam_step(params.flat(), grad, adam);
            epoch_loss += batch_loss * inv;
            ++batches;
        }
        if (!all_finite(params.flat())) throw TrainingDivergence("train_learner: parameters became non-finite");
        const double hold = evaluate_learner(params, selection_set).first;
        fit.report.epochs.push_back({epoch, epoch_loss / static_cast<double>(batches), hold});
        if (hold < best) {
            best = hold;
            fit.params = params;
            fit.report.best_epoch = epoch;
            fit.report.best_holdout_nll = hold;
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    fit.report.holdout_accuracy = evaluate_learner(fit.params, selection_set).second;
    return fit;
}

}  // namespace advprobe
