// Acceptance suite: one PASS/FAIL line per criterion; exit status 1 if any fails.
//
// Seeds are fixed here once and never tuned against the outcome.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "advprobe/checkpoint.hpp"
#include "advprobe/episode_io.hpp"
#include "advprobe/pipeline.hpp"

namespace fs = std::filesystem;
using namespace advprobe;

namespace {

constexpr std::uint64_t kGradSeed = 606;
constexpr std::uint64_t kFitSeed = 101;
constexpr std::uint64_t kOracleSeed = 202;
constexpr std::uint64_t kLiftSeed = 303;
constexpr std::uint64_t kTrustSeed = 404;
constexpr std::uint64_t kCliSeed = 505;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const std::function<Outcome()>& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = fn();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("%s %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs);
    std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Every bandit episode run under adversary control and every trust episode
// produced by this suite, for the invariant checks at the end.
std::vector<EpisodeLog> all_bandit;
std::vector<TaskSpec> all_bandit_tasks;
std::vector<EpisodeLog> all_trust;

void keep(const TaskSpec& task, const std::vector<EpisodeLog>& logs) {
    for (const auto& e : logs) {
        if (task.kind == TaskKind::bandit) {
            all_bandit.push_back(e);
            all_bandit_tasks.push_back(task);
        } else {
            all_trust.push_back(e);
        }
    }
}

std::vector<EpisodeLog> collect(const TaskSpec& task, const Subject& subject, const AdversaryHandle& adv,
                                const LearnerParams* learner, int n, std::uint64_t seed) {
    auto logs = collect_episodes(task, subject, adv, learner, n, seed);
    keep(task, logs);
    return logs;
}

double mean_target_choices(const std::vector<EpisodeLog>& logs, int target_arm) {
    double total = 0.0;
    for (const auto& e : logs)
        for (const auto& r : e.trials) total += r.action == target_arm;
    return total / static_cast<double>(logs.size());
}

DqnConfig dqn(int episodes, std::uint64_t seed) {
    DqnConfig c;
    c.episodes = episodes;
    c.seed = seed;
    c.curve_window = 500;
    return c;
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
    Rng rng(kGradSeed);
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const std::size_t T = 1 + rng.below(10), H = 1 + rng.below(8), A = 2 + rng.below(20);
        const auto p = LearnerParams::random(kFeatureDim, H, A, rng, 0.5);
        std::vector<Vector> xs(T, Vector(kFeatureDim));
        for (auto& x : xs)
            for (double& v : x) v = rng.uniform(-1.0, 1.0);
        std::vector<int> as(T);
        for (int& a : as) a = static_cast<int>(rng.below(A));
        const auto analytic = sequence_nll(p, xs, as).grad;
        worst = std::max(worst, grad_check(
                                    [&](std::span<const double> theta) {
                                        LearnerParams q = p;
                                        std::copy(theta.begin(), theta.end(), q.flat().begin());
                                        return sequence_nll(q, xs, as, false).loss;
                                    },
                                    p.flat(), analytic, 1e-4));
    }
    return {worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " over 20 instances"};
}

Outcome uniform_loss() {
    TaskSpec bandit;
    TaskSpec trust;
    trust.kind = TaskKind::trust;
    const auto b_logs = collect(bandit, RwSoftmaxSubject(bandit, {}), RandomAdversary{}, nullptr, 20, kGradSeed);
    const auto t_logs = collect(trust, RwSoftmaxSubject(trust, {}), RandomAdversary{}, nullptr, 20, kGradSeed);
    double worst = 0.0;
    for (const auto& e : b_logs)
        worst = std::max(worst, std::abs(sequence_nll(LearnerParams(kFeatureDim, 10, 2), bandit, e).loss - std::log(2.0)));
    for (const auto& e : t_logs)
        worst = std::max(worst, std::abs(sequence_nll(LearnerParams(kFeatureDim, 10, 21), trust, e).loss - std::log(21.0)));
    return {worst <= 1e-9, "max |loss - ln A| " + fmt("%.2e", worst) + " over 40 episodes"};
}

Outcome learner_fit() {
    const auto t0 = std::chrono::steady_clock::now();
    const TaskSpec task;
    const auto logs = collect(task, WslsSubject(task, {}), RandomAdversary{}, nullptr, 500, kFitSeed);
    LearnerConfig cfg;
    cfg.seed = kFitSeed;
    const auto fit = train_learner(logs, task, cfg);
    const double secs = seconds_since(t0);
    return {fit.report.holdout_accuracy >= 0.95 && secs < 300,
            "held-out accuracy " + fmt("%.4f", fit.report.holdout_accuracy) + " after " +
                std::to_string(fit.report.epochs.size()) + " epochs"};
}

Outcome oracle_equivalence() {
    const auto t0 = std::chrono::steady_clock::now();
    TaskSpec task;
    task.bandit.trials = 6;
    task.bandit.budget_per_arm = 2;
    const WslsSubject wsls(task, {});
    const int optimum = brute_force_oracle(task.bandit, wsls).best_target_choices;
    const auto data = collect(task, wsls, RandomAdversary{}, nullptr, 500, kOracleSeed);
    LearnerConfig lc;
    lc.seed = kOracleSeed;
    const auto fit = train_learner(data, task, lc);
    auto dc = dqn(5000, kOracleSeed);
    dc.reward_scale = 0.1;
    const auto trained = train_adversary_loop(fit.params, task, Objective::target, dc);
    if (trained.diverged) return {false, "training diverged: " + trained.divergence_reason};
    const auto run = closed_loop_run(task, trained.adversary, fit.params, wsls, 100, kOracleSeed);
    keep(task, run.logs);
    const double achieved = mean_target_choices(run.logs, task.bandit.target_arm);
    const double secs = seconds_since(t0);
    return {achieved >= 0.95 * optimum && secs < 600,
            "greedy mean " + fmt("%.2f", achieved) + " target choices vs optimum " + std::to_string(optimum)};
}

// Shared with the checkpoint criterion.
LearnerParams lift_learner;
QNetParams lift_qnet;

Outcome adversarial_lift() {
    const auto t0 = std::chrono::steady_clock::now();
    const TaskSpec task;
    const StickySubject sticky(task, {});
    const auto data = collect(task, sticky, RandomAdversary{}, nullptr, 500, kLiftSeed);
    LearnerConfig lc;
    lc.seed = kLiftSeed;
    const auto fit = train_learner(data, task, lc);
    auto dc = dqn(5000, kLiftSeed);
    dc.lr = 3e-4;
    dc.train_every = 4;
    dc.reward_scale = 0.1;
    const auto trained = train_adversary_loop(fit.params, task, Objective::target, dc);
    if (trained.diverged) return {false, "training diverged: " + trained.divergence_reason};
    lift_learner = fit.params;
    lift_qnet = trained.adversary.qnet;
    const std::uint64_t eval_seed = derive_seed(kLiftSeed, 1);
    const auto adv = closed_loop_run(task, trained.adversary, fit.params, sticky, 200, eval_seed);
    const auto base = collect(task, sticky, RandomAdversary{}, &fit.params, 200, eval_seed);
    keep(task, adv.logs);
    const double r_adv = adv.report["target_rate"]["mean"].get<double>();
    const double r_base = metrics_report(task, base)["target_rate"]["mean"].get<double>();
    const double secs = seconds_since(t0);
    return {r_adv - r_base >= 0.15 && secs < 1800,
            "target rate " + fmt("%.4f", r_adv) + " vs random " + fmt("%.4f", r_base) + " (lift " +
                fmt("%+.1f", 100.0 * (r_adv - r_base)) + " pp, 200 paired episodes)"};
}

Outcome objective_ordering() {
    TaskSpec task;
    task.kind = TaskKind::trust;
    const RwSoftmaxSubject rw(task, {});
    const auto data = collect(task, rw, RandomAdversary{}, nullptr, 500, kTrustSeed);
    LearnerConfig lc;
    lc.seed = kTrustSeed;
    const auto fit = train_learner(data, task, lc);
    const std::uint64_t eval_seed = derive_seed(kTrustSeed, 1);
    auto evaluate = [&](const AdversaryHandle& adv) {
        const auto logs = collect(task, rw, adv, &fit.params, 200, eval_seed);
        return trust_metrics(logs, task.trust);
    };
    std::vector<TrustMetrics> m;
    for (Objective o : {Objective::max, Objective::fair}) {
        const auto trained = train_adversary_loop(fit.params, task, o, dqn(5000, kTrustSeed));
        if (trained.diverged) return {false, "training diverged: " + trained.divergence_reason};
        m.push_back(evaluate(trained.adversary));
    }
    const auto random = evaluate(RandomAdversary{});
    const auto& mx = m[0];
    const auto& fair = m[1];
    const bool gap_ok = fair.earnings_gap.mean <= mx.earnings_gap.mean;
    const bool trustee_ok = mx.trustee_total.mean >= random.trustee_total.mean;
    std::ostringstream d;
    d.precision(1);
    d << std::fixed << "gap FAIR " << fair.earnings_gap.mean << " <= MAX " << mx.earnings_gap.mean
      << "; trustee MAX " << mx.trustee_total.mean << " >= random " << random.trustee_total.mean
      << " (investor MAX/FAIR/random " << mx.investor_total.mean << "/" << fair.investor_total.mean << "/"
      << random.investor_total.mean << ")";
    return {gap_ok && trustee_ok, d.str()};
}

Outcome budget_invariant() {
    std::size_t bad = 0;
    for (std::size_t i = 0; i < all_bandit.size(); ++i) {
        const auto& cfg = all_bandit_tasks[i].bandit;
        BanditState s;
        bool ok = all_bandit[i].trials.size() == static_cast<std::size_t>(cfg.trials);
        for (const auto& r : all_bandit[i].trials) {
            if (!ok) break;
            if (!allocation_allowed(bandit_allocation_mask(s, cfg), r.allocation)) ok = false;
            else bandit_step(s, cfg, r.allocation, r.action);
        }
        ok = ok && s.used[0] == cfg.budget_per_arm && s.used[1] == cfg.budget_per_arm;
        bad += !ok;
    }
    return {bad == 0 && !all_bandit.empty(),
            std::to_string(all_bandit.size() - bad) + "/" + std::to_string(all_bandit.size()) +
                " bandit episodes end at exact budgets with no mask violation"};
}

Outcome trust_conservation() {
    std::size_t bad = 0;
    for (const auto& e : all_trust) {
        std::int64_t expected = 0;
        bool ok = !e.trials.empty();
        for (const auto& r : e.trials) {
            expected += 4LL * (20 + 2 * r.action);
            const auto* o = std::get_if<TrustObservation>(&r.observation);
            if (!o || o->investor_total_q + o->trustee_total_q != expected) ok = false;
        }
        bad += !ok;
    }
    return {bad == 0 && !all_trust.empty(),
            std::to_string(all_trust.size() - bad) + "/" + std::to_string(all_trust.size()) +
                " trust episodes conserve earnings exactly"};
}

int run(const std::string& cmd) {
    const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
    if (rc != 0) throw std::runtime_error("command failed (" + std::to_string(rc) + "): " + cmd);
    return rc;
}

Outcome cli_determinism(const std::string& cli, const fs::path& work) {
    const fs::path d = work / "determinism";
    fs::remove_all(d);
    fs::create_directories(d);
    const std::string exe = "\"" + cli + "\"";
    const std::string seed = std::to_string(kCliSeed);
    auto p = [&](const char* name) { return "\"" + (d / name).string() + "\""; };
    const std::string collect_args = " collect --task bandit --subject rw-softmax --episodes 40 --seed " + seed;
    run(exe + collect_args + " --out " + p("c1.ndjson"));
    run(exe + collect_args + " --out " + p("c2.ndjson"));
    run(exe + " train-learner --data " + p("c1.ndjson") + " --epochs 5 --seed " + seed + " --out " + p("l.json"));
    run(exe + " train-adversary --learner " + p("l.json") +
        " --objective target --episodes 40 --warmup 200 --seed " + seed + " --out " + p("a.json"));
    const std::string eval_args = " evaluate --task bandit --subject rw-softmax --adversary " + p("a.json") +
                                  " --learner " + p("l.json") + " --episodes 40 --seed " + seed;
    run(exe + eval_args + " --report " + p("r1.json") + " --log " + p("e1.ndjson"));
    run(exe + eval_args + " --report " + p("r2.json") + " --log " + p("e2.ndjson"));
    const auto c1 = read_file(d / "c1.ndjson"), c2 = read_file(d / "c2.ndjson");
    const auto e1 = read_file(d / "e1.ndjson"), e2 = read_file(d / "e2.ndjson");
    const TaskSpec task;
    keep(task, read_ndjson_file(d / "c1.ndjson"));
    keep(task, read_ndjson_file(d / "e1.ndjson"));
    const bool ok = !c1.empty() && !e1.empty() && c1 == c2 && e1 == e2;
    return {ok, "collect logs " + std::string(c1 == c2 ? "identical" : "differ") + " (" + std::to_string(c1.size()) +
                    " bytes), evaluate logs " + (e1 == e2 ? "identical" : "differ") + " (" +
                    std::to_string(e1.size()) + " bytes)"};
}

Outcome checkpoint_round_trip(const fs::path& work) {
    const fs::path d = work / "checkpoints";
    fs::remove_all(d);
    fs::create_directories(d);
    if (lift_learner.size() == 0 || lift_qnet.size() == 0) {
        Rng rng(kLiftSeed);
        lift_learner = LearnerParams::random(kFeatureDim, 10, 2, rng, 0.1);
        lift_qnet = QNetParams::random(adv_state_dim(TaskKind::bandit, 10), 64, 64, 4, rng);
    }
    const TaskSpec task;
    auto lc = make_learner_checkpoint(lift_learner, task);
    save_checkpoint(d / "learner.json", lc);
    auto qc = make_qnet_checkpoint(lift_qnet, Objective::target, task, lc.digest);
    save_checkpoint(d / "qnet.json", qc);
    const bool exact = load_learner(d / "learner.json").params == lift_learner &&
                       load_adversary(d / "qnet.json").qnet == lift_qnet;

    const std::string text = read_file(d / "learner.json");
    int rejected = 0, attempts = 0;
    auto expect_rejected = [&](const std::string& name, const std::string& content) {
        ++attempts;
        std::ofstream(d / name, std::ios::binary | std::ios::trunc) << content;
        try {
            load_learner(d / name);
        } catch (const DataCorruption&) {
            ++rejected;
        } catch (const VersionError&) {
            ++rejected;
        }
    };
    expect_rejected("truncated.json", text.substr(0, text.size() / 2));
    auto j = nlohmann::json::parse(text);
    j["weights"]["W_update"][0] = j["weights"]["W_update"][0].get<double>() * 1.5 + 1e-9;
    expect_rejected("tampered.json", j.dump());
    auto v = nlohmann::json::parse(text);
    v["version"] = kCheckpointVersion + 1;
    expect_rejected("version.json", v.dump());
    expect_rejected("empty.json", "");
    std::string flipped = text;
    flipped[flipped.size() / 3] ^= 0x01;
    expect_rejected("bitflip.json", flipped);
    return {exact && rejected == attempts,
            std::string(exact ? "weights bit-exact after save/load" : "weights differ after save/load") + "; " +
                std::to_string(rejected) + "/" + std::to_string(attempts) + " corrupted files rejected"};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance suite"};
    std::string cli;
    std::string work = "acceptance_work";
    app.add_option("--cli", cli, "path to the advprobe executable")->required();
    app.add_option("--work", work, "scratch directory");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    report("gradient-correctness", gradient_check);
    report("uniform-policy-loss", uniform_loss);
    report("learner-fit", learner_fit);
    report("oracle-equivalence", oracle_equivalence);
    report("adversarial-lift", adversarial_lift);
    report("objective-ordering", objective_ordering);
    report("determinism", [&] { return cli_determinism(cli, work); });
    report("checkpoint-round-trip", [&] { return checkpoint_round_trip(work); });
    report("budget-invariant", budget_invariant);
    report("mrtt-conservation", trust_conservation);

    std::printf("%d criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
