#include "advprobe/learner.hpp"
#include "advprobe/pipeline.hpp"

#include <cmath>

#include <gtest/gtest.h>

namespace advprobe {
namespace {

using B = LearnerParams;

// Reference GRU written with explicit index loops over the row-major blocks.
struct RefStep {
    Vector h, pi;
};

double ref_sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

RefStep ref_step(const LearnerParams& p, const Vector& h, const Vector& x) {
    const std::size_t I = p.input_dim(), H = p.hidden_dim(), A = p.action_dim();
    auto at = [&](B::Block b, std::size_t r, std::size_t c) { return p.block(b)[r * p.cols(b) + c]; };
    Vector z(H), r(H), c(H), out(H);
    for (std::size_t i = 0; i < H; ++i) {
        double az = at(B::bz, i, 0), ar = at(B::br, i, 0);
        for (std::size_t j = 0; j < I; ++j) {
            az += at(B::Wz, i, j) * x[j];
            ar += at(B::Wr, i, j) * x[j];
        }
        for (std::size_t j = 0; j < H; ++j) {
            az += at(B::Uz, i, j) * h[j];
            ar += at(B::Ur, i, j) * h[j];
        }
        z[i] = ref_sig(az);
        r[i] = ref_sig(ar);
    }
    for (std::size_t i = 0; i < H; ++i) {
        double ac = at(B::bc, i, 0);
        for (std::size_t j = 0; j < I; ++j) ac += at(B::Wc, i, j) * x[j];
        for (std::size_t j = 0; j < H; ++j) ac += at(B::Uc, i, j) * r[j] * h[j];
        c[i] = std::tanh(ac);
        out[i] = (1.0 - z[i]) * h[i] + z[i] * c[i];
    }
    Vector logits(A);
    double total = 0.0;
    for (std::size_t k = 0; k < A; ++k) {
        logits[k] = at(B::bo, k, 0);
        for (std::size_t j = 0; j < H; ++j) logits[k] += at(B::Wo, k, j) * out[j];
    }
    Vector pi(A);
    for (std::size_t k = 0; k < A; ++k) total += std::exp(logits[k]);
    for (std::size_t k = 0; k < A; ++k) pi[k] = std::exp(logits[k]) / total;
    return {out, pi};
}

double ref_nll(const LearnerParams& p, const std::vector<Vector>& xs, const std::vector<int>& as) {
    Vector h(p.hidden_dim(), 0.0);
    double loss = 0.0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        auto s = ref_step(p, h, xs[t]);
        loss -= std::log(s.pi[static_cast<std::size_t>(as[t])]);
        h = s.h;
    }
    return loss / static_cast<double>(xs.size());
}

std::vector<Vector> random_features(std::size_t T, Rng& rng) {
    std::vector<Vector> xs(T, Vector(kFeatureDim));
    for (auto& x : xs)
        for (double& v : x) v = rng.uniform() * 2.0 - 1.0;
    return xs;
}

std::vector<int> random_actions(std::size_t T, std::size_t A, Rng& rng) {
    std::vector<int> as(T);
    for (int& a : as) a = static_cast<int>(rng.below(A));
    return as;
}

TEST(GruStep, ZeroParamsHalveState) {
    LearnerParams p(kFeatureDim, 1, 2);
    const auto [h, pi] = gru_forward_step(p, Vector{0.4}, Vector{1, 0, 1});
    EXPECT_DOUBLE_EQ(h[0], 0.2);
    EXPECT_DOUBLE_EQ(pi[0], 0.5);
    EXPECT_DOUBLE_EQ(pi[1], 0.5);
}

TEST(GruStep, ObserverModeThreeSteps) {
    LearnerParams p(kFeatureDim, 1, 2);
    Vector h{0.8};
    for (int i = 0; i < 3; ++i) h = observe_action(p, h, Vector{0, 1, 0});
    EXPECT_NEAR(h[0], 0.1, 1e-15);
}

TEST(GruStep, MatchesReferenceImplementation) {
    Rng rng(101);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t H = 1 + rng.below(8), A = 2 + rng.below(20);
        auto p = LearnerParams::random(kFeatureDim, H, A, rng, 0.8);
        Vector h(H);
        for (double& v : h) v = rng.uniform() * 2.0 - 1.0;
        const Vector x = random_features(1, rng)[0];
        const auto [h2, pi] = gru_forward_step(p, h, x);
        const auto ref = ref_step(p, h, x);
        for (std::size_t i = 0; i < H; ++i) EXPECT_NEAR(h2[i], ref.h[i], 1e-13);
        for (std::size_t k = 0; k < A; ++k) EXPECT_NEAR(pi[k], ref.pi[k], 1e-13);
        EXPECT_EQ(observe_action(p, h, x), h2);
    }
}

TEST(GruStep, DimensionErrors) {
    LearnerParams p(kFeatureDim, 3, 2);
    EXPECT_THROW(gru_forward_step(p, Vector(2), Vector(kFeatureDim)), InvalidInput);
    EXPECT_THROW(gru_forward_step(p, Vector(3), Vector(4)), InvalidInput);
    EXPECT_THROW(LearnerParams(0, 3, 2), InvalidInput);
}

TEST(SequenceNll, MatchesReferenceLoss) {
    Rng rng(7);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t T = 1 + rng.below(10), H = 1 + rng.below(8), A = 2 + rng.below(20);
        auto p = LearnerParams::random(kFeatureDim, H, A, rng, 0.8);
        const auto xs = random_features(T, rng);
        const auto as = random_actions(T, A, rng);
        EXPECT_NEAR(sequence_nll(p, xs, as, false).loss, ref_nll(p, xs, as), 1e-12);
    }
}

TEST(SequenceNll, UniformLossAtZeroParams) {
    Rng rng(3);
    for (std::size_t A : {2u, 21u}) {
        LearnerParams p(kFeatureDim, 10, A);
        for (int trial = 0; trial < 5; ++trial) {
            const std::size_t T = 1 + rng.below(100);
            const auto r = sequence_nll(p, random_features(T, rng), random_actions(T, A, rng));
            EXPECT_NEAR(r.loss, std::log(static_cast<double>(A)), 1e-9);
        }
    }
}

TEST(SequenceNll, GradientMatchesFiniteDifferences) {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t T = 1 + rng.below(10), H = 1 + rng.below(8), A = 2 + rng.below(20);
        auto p = LearnerParams::random(kFeatureDim, H, A, rng, 0.5);
        const auto xs = random_features(T, rng);
        const auto as = random_actions(T, A, rng);
        const auto analytic = sequence_nll(p, xs, as).grad;
        // Step 1e-4: rounding noise at 1e-5 swamps coordinates whose gradient is ~1e-8.
        const double worst = grad_check(
            [&](std::span<const double> theta) {
                LearnerParams q = p;
                std::copy(theta.begin(), theta.end(), q.flat().begin());
                return ref_nll(q, xs, as);
            },
            p.flat(), analytic, 1e-4);
        EXPECT_LT(worst, 1e-4) << "instance " << trial;
    }
}

TEST(SequenceNll, OutOfRangeActionIsCorruption) {
    LearnerParams p(kFeatureDim, 2, 2);
    Rng rng(1);
    EXPECT_THROW(sequence_nll(p, random_features(3, rng), std::vector<int>{0, 2, 1}), DataCorruption);
    EXPECT_THROW(sequence_nll(p, random_features(3, rng), std::vector<int>{0, 1}), InvalidInput);
}

std::vector<EpisodeLog> constant_arm_logs(int n, Rng& rng) {
    std::vector<EpisodeLog> logs(static_cast<std::size_t>(n));
    for (int e = 0; e < n; ++e) {
        logs[e].episode = e;
        for (int t = 1; t <= 100; ++t) {
            TrialRecord r;
            r.t = t;
            r.action = 0;
            r.reward = static_cast<double>(rng.below(2));
            r.observation = BanditObservation{static_cast<int>(r.reward)};
            logs[e].trials.push_back(r);
        }
    }
    return logs;
}

TEST(TrainLearner, ConstantChoiceLearnedWithinTwentyEpochs) {
    Rng rng(5);
    const auto logs = constant_arm_logs(500, rng);
    LearnerConfig cfg;
    cfg.epochs = 20;
    const auto fit = train_learner(logs, TaskSpec{}, cfg);
    EXPECT_LT(fit.report.best_holdout_nll, 0.01);
    EXPECT_DOUBLE_EQ(fit.report.holdout_accuracy, 1.0);
    EXPECT_EQ(fit.report.holdout_episodes, 50u);
    EXPECT_EQ(fit.report.train_episodes, 450u);
    EXPECT_LE(fit.report.max_applied_grad_norm, cfg.clip + 1e-12);
}

TEST(TrainLearner, SameSeedBitIdentical) {
    Rng rng(6);
    const auto logs = constant_arm_logs(40, rng);
    LearnerConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 99;
    const auto a = train_learner(logs, TaskSpec{}, cfg);
    const auto b = train_learner(logs, TaskSpec{}, cfg);
    EXPECT_EQ(a.params, b.params);
    cfg.seed = 100;
    EXPECT_FALSE(train_learner(logs, TaskSpec{}, cfg).params == a.params);
}

TEST(TrainLearner, RejectsBadDatasets) {
    Rng rng(8);
    auto logs = constant_arm_logs(3, rng);
    logs[1].task = TaskKind::trust;
    EXPECT_THROW(train_learner(logs, TaskSpec{}, LearnerConfig{}), InvalidInput);
    EXPECT_THROW(train_learner(std::span<const EpisodeLog>{}, TaskSpec{}, LearnerConfig{}), InvalidInput);
}

TEST(TrainLearner, FitsWinStayLoseShift) {
    const TaskSpec task;
    const WslsSubject subject(task, WslsParams{});
    const auto logs = collect_episodes(task, subject, RandomAdversary{}, nullptr, 500, 2024);
    LearnerConfig cfg;
    cfg.epochs = 60;
    const auto fit = train_learner(logs, task, cfg);
    EXPECT_GE(fit.report.holdout_accuracy, 0.95);
    EXPECT_GT(fit.report.best_epoch, 0);
}

TEST(TrainLearner, RecordedHiddenStatesReplayFromLog) {
    const TaskSpec task;
    Rng rng(12);
    const auto p = LearnerParams::random(kFeatureDim, 6, 2, rng, 0.5);
    WslsSubject subject(task, WslsParams{});
    const auto log = run_episode(task, subject, RandomAdversary{}, &p, 0, 77);
    const auto feats = episode_features(task, log);
    Vector h(6, 0.0);
    for (std::size_t t = 0; t < log.trials.size(); ++t) {
        h = observe_action(p, h, feats[t]);
        ASSERT_EQ(log.trials[t].hidden, h) << "trial " << t + 1;
    }
}

}  // namespace
}  // namespace advprobe
