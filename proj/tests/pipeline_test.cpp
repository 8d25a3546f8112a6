#include "advprobe/episode_io.hpp"
#include "advprobe/pipeline.hpp"

#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

namespace advprobe {
namespace {

namespace fs = std::filesystem;

TaskSpec trust_task() {
    TaskSpec t;
    t.kind = TaskKind::trust;
    return t;
}

void expect_budget_invariant(const TaskSpec& task, const std::vector<EpisodeLog>& logs) {
    for (const auto& e : logs) {
        BanditState s;
        for (const auto& r : e.trials) {
            ASSERT_TRUE(allocation_allowed(bandit_allocation_mask(s, task.bandit), r.allocation))
                << "episode " << e.episode << " trial " << r.t;
            bandit_step(s, task.bandit, r.allocation, r.action);
        }
        EXPECT_EQ(s.used[0], task.bandit.budget_per_arm);
        EXPECT_EQ(s.used[1], task.bandit.budget_per_arm);
    }
}

TEST(Collect, CountsSeedsAndInvariants) {
    const TaskSpec task;
    const WslsSubject wsls(task, WslsParams{});
    const auto logs = collect_episodes(task, wsls, RandomAdversary{}, nullptr, 25, 99);
    ASSERT_EQ(logs.size(), 25u);
    for (int i = 0; i < 25; ++i) {
        EXPECT_EQ(logs[i].episode, i);
        EXPECT_EQ(logs[i].seed, derive_seed(99, static_cast<std::uint64_t>(i)));
        EXPECT_EQ(logs[i].trials.size(), 100u);
        EXPECT_EQ(logs[i].subject, wsls.id());
        EXPECT_TRUE(logs[i].trials[0].hidden.empty());
        EXPECT_NO_THROW(replay_episode(task, logs[i]));
    }
    expect_budget_invariant(task, logs);
    EXPECT_THROW(collect_episodes(task, wsls, RandomAdversary{}, nullptr, 0, 1), InvalidInput);
}

TEST(Collect, TrustConservation) {
    const auto task = trust_task();
    const RwSoftmaxSubject rw(task, RwSoftmaxParams{});
    for (const auto& e : collect_episodes(task, rw, RandomAdversary{}, nullptr, 50, 5)) {
        std::int64_t expected = 0;
        for (const auto& r : e.trials) {
            expected += 4 * (20 + 2 * r.action);
            const auto& o = std::get<TrustObservation>(r.observation);
            ASSERT_EQ(o.investor_total_q + o.trustee_total_q, expected);
        }
        EXPECT_NO_THROW(replay_episode(task, e));
    }
}

TEST(Collect, SameSeedSameBytes) {
    const TaskSpec task;
    const RwSoftmaxSubject rw(task, RwSoftmaxParams{});
    const auto a = to_ndjson(collect_episodes(task, rw, RandomAdversary{}, nullptr, 10, 7));
    const auto b = to_ndjson(collect_episodes(task, rw, RandomAdversary{}, nullptr, 10, 7));
    const auto c = to_ndjson(collect_episodes(task, rw, RandomAdversary{}, nullptr, 10, 8));
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(EpisodeIo, NdjsonRoundTrip) {
    Rng rng(3);
    const auto learner = LearnerParams::random(kFeatureDim, 3, 21, rng, 0.5);
    const auto task = trust_task();
    const StickySubject sticky(task, StickyParams{});
    const auto logs = collect_episodes(task, sticky, RandomAdversary{}, &learner, 4, 11);
    const std::string text = to_ndjson(logs);
    std::istringstream in(text);
    const auto back = read_ndjson(in);
    ASSERT_EQ(back.size(), logs.size());
    EXPECT_EQ(to_ndjson(back), text);
    EXPECT_EQ(back[2].trials[4].hidden, logs[2].trials[4].hidden);

    std::istringstream gap(text.substr(text.find('\n') + 1));
    EXPECT_THROW(read_ndjson(gap), DataCorruption);
    std::istringstream garbage("{\"ep\":0,\"t\":1}\n");
    EXPECT_THROW(read_ndjson(garbage), DataCorruption);
}

class AbortAtThree final : public Subject {
public:
    std::string id() const override { return "abort"; }
    bool deterministic() const override { return true; }
    void reset() override { n_ = 0; }
    int act(const Feedback&, Rng&) override {
        if (++n_ == 3) throw SubjectAborted("gave up");
        return 0;
    }
    std::unique_ptr<Subject> clone() const override { return std::make_unique<AbortAtThree>(); }

private:
    int n_ = 0;
};

TEST(Collect, AbortedEpisodesAreFlagged) {
    const TaskSpec task;
    const auto logs = collect_episodes(task, AbortAtThree{}, RandomAdversary{}, nullptr, 3, 1);
    for (const auto& e : logs) {
        EXPECT_TRUE(e.aborted);
        EXPECT_EQ(e.trials.size(), 2u);
        EXPECT_NE(e.abort_reason.find("gave up"), std::string::npos);
    }
    EXPECT_TRUE(completed(logs).empty());
    const auto report = metrics_report(task, logs);
    EXPECT_EQ(report["episodes"], 0);
    EXPECT_EQ(report["aborted_episodes"], 3);
}

TEST(ClosedLoop, HiddenStatesReplayOffline) {
    const TaskSpec task;
    Rng rng(8);
    const auto learner = LearnerParams::random(kFeatureDim, 5, 2, rng, 0.5);
    const TrainedAdversary adv{QNetParams::random(adv_state_dim(task.kind, 5), 8, 8, 4, rng), Objective::target};
    const WslsSubject wsls(task, WslsParams{});
    const auto run = closed_loop_run(task, adv, learner, wsls, 5, 21);
    ASSERT_EQ(run.logs.size(), 5u);
    EXPECT_EQ(run.report["episodes"], 5);
    expect_budget_invariant(task, run.logs);
    for (const auto& log : run.logs) {
        const auto feats = episode_features(task, log);
        Vector h(5, 0.0);
        for (std::size_t t = 0; t < log.trials.size(); ++t) {
            h = observe_action(learner, h, feats[t]);
            ASSERT_EQ(log.trials[t].hidden, h);
        }
    }
    // Greedy play with the same seed repeats exactly.
    EXPECT_EQ(to_ndjson(closed_loop_run(task, adv, learner, wsls, 5, 21).logs), to_ndjson(run.logs));
}

TEST(ClosedLoop, IncompatibleArtifactsRejected) {
    const TaskSpec task;
    Rng rng(9);
    const auto learner = LearnerParams::random(kFeatureDim, 5, 2, rng, 0.5);
    const TrainedAdversary wrong_dims{QNetParams::random(4, 8, 8, 4, rng), Objective::target};
    const WslsSubject wsls(task, WslsParams{});
    EXPECT_THROW(closed_loop_run(task, wrong_dims, learner, wsls, 1, 1), InvalidInput);
    const TrainedAdversary trust_obj{QNetParams::random(adv_state_dim(task.kind, 5), 8, 8, 4, rng), Objective::max};
    EXPECT_THROW(closed_loop_run(task, trust_obj, learner, wsls, 1, 1), InvalidInput);
    EXPECT_THROW(collect_episodes(task, wsls, wrong_dims, nullptr, 1, 1), InvalidInput);
}

TEST(Rewards, MaxAndFairHandValues) {
    const TrustConfig cfg;
    // invest 10, repay 25%: trustee keeps 30 - 7.5 of a 60-unit scale.
    EXPECT_DOUBLE_EQ(max_round_reward(10, 30, cfg), 22.5 / 60);
    EXPECT_DOUBLE_EQ(max_round_reward(0, 0, cfg), 0.0);
    TrustState s;
    s.investor_total_q = 4 * 300;
    s.trustee_total_q = 4 * 100;
    EXPECT_NEAR(fair_terminal_reward(s, cfg), (300.0 + 100.0) / 600 - 2.0 * 200.0 / 600, 1e-15);
    s.trustee_total_q = s.investor_total_q;
    EXPECT_DOUBLE_EQ(fair_terminal_reward(s, cfg), 600.0 / 600);
}

TEST(Rewards, EpsilonSchedule) {
    DqnConfig c;
    c.episodes = 1000;
    EXPECT_DOUBLE_EQ(epsilon_at(c, 0), 1.0);
    EXPECT_DOUBLE_EQ(epsilon_at(c, 250), 0.525);
    EXPECT_DOUBLE_EQ(epsilon_at(c, 500), 0.05);
    EXPECT_DOUBLE_EQ(epsilon_at(c, 999), 0.05);
}

DqnConfig small_dqn(std::uint64_t seed) {
    DqnConfig c;
    c.episodes = 60;
    c.hidden1 = 16;
    c.hidden2 = 16;
    c.warmup = 100;
    c.batch = 16;
    c.target_sync = 50;
    c.curve_window = 20;
    c.seed = seed;
    return c;
}

TEST(TrainAdversary, ShapesAndDeterminism) {
    TaskSpec task;
    task.bandit = {20, 5, 0, 0.25};
    Rng rng(12);
    const auto learner = LearnerParams::random(kFeatureDim, 4, 2, rng, 0.5);
    const auto a = train_adversary_loop(learner, task, Objective::target, small_dqn(3));
    EXPECT_FALSE(a.diverged);
    EXPECT_EQ(a.episode_returns.size(), 60u);
    EXPECT_EQ(a.curve.size(), 3u);
    EXPECT_GT(a.updates, 0u);
    EXPECT_EQ(a.adversary.qnet.input_dim(), adv_state_dim(TaskKind::bandit, 4));
    for (double r : a.episode_returns) {
        EXPECT_GE(r, 0.0);
        EXPECT_LE(r, 20.0);
    }
    const auto b = train_adversary_loop(learner, task, Objective::target, small_dqn(3));
    EXPECT_EQ(a.adversary.qnet, b.adversary.qnet);
    EXPECT_EQ(a.episode_returns, b.episode_returns);
    EXPECT_THROW(train_adversary_loop(learner, task, Objective::max, small_dqn(3)), InvalidInput);
}

TEST(TrainAdversary, TrustObjectivesRun) {
    const auto task = trust_task();
    Rng rng(13);
    const auto learner = LearnerParams::random(kFeatureDim, 4, 21, rng, 0.5);
    for (Objective o : {Objective::max, Objective::fair}) {
        const auto r = train_adversary_loop(learner, task, o, small_dqn(4));
        EXPECT_FALSE(r.diverged);
        EXPECT_EQ(r.adversary.qnet.action_count(), 5u);
        for (double ret : r.episode_returns) {
            EXPECT_GE(ret, o == Objective::max ? 0.0 : -1.0);
            EXPECT_LE(ret, 10.0);
        }
    }
}

TEST(TrainAdversary, CurveMonotoneFraction) {
    const std::vector<double> up{1, 2, 3, 4, 5, 6, 7, 8};
    const std::vector<double> down{8, 7, 6, 5, 4, 3, 2, 1};
    EXPECT_DOUBLE_EQ(curve_monotone_fraction(up, 3), 1.0);
    EXPECT_DOUBLE_EQ(curve_monotone_fraction(down, 3), 0.0);
    EXPECT_DOUBLE_EQ(curve_monotone_fraction(std::vector<double>{1, 0}, 3), 1.0);
}

TEST(Manifest, RecordsAndVerifiesArtifacts) {
    const fs::path dir = fs::temp_directory_path() / ("advprobe_manifest_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir);
    const TaskSpec task;
    const WslsSubject wsls(task, WslsParams{});
    const auto logs = collect_episodes(task, wsls, RandomAdversary{}, nullptr, 20, 1);
    LearnerConfig cfg;
    cfg.epochs = 2;
    {
        RunManifest m(dir / "run.json");
        fit_learner(logs, task, cfg, dir / "learner.json", &m);
    }
    RunManifest m(dir / "run.json");
    EXPECT_TRUE(m.verify().empty());
    EXPECT_EQ(m.json()["seeds"]["train-learner"], 0);
    EXPECT_TRUE(m.json()["phases"].contains("train-learner"));
    EXPECT_EQ(m.json()["artifacts"]["learner"]["sha256"], sha256_file(dir / "learner.json"));
    EXPECT_EQ(load_learner(dir / "learner.json").params.hidden_dim(), 10u);
    {
        std::ofstream out(dir / "learner.json", std::ios::app);
        out << " ";
    }
    EXPECT_EQ(m.verify(), std::vector<std::string>{"learner"});
    fs::remove_all(dir);
}

}  // namespace
}  // namespace advprobe
