// Command-line front end: collect, train-learner, train-adversary, evaluate,
// report, serve.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <httplib.h>
#include <json.hpp>

#include "advprobe/checkpoint.hpp"
#include "advprobe/episode_io.hpp"
#include "advprobe/http_service.hpp"
#include "advprobe/llm_subject.hpp"
#include "advprobe/pipeline.hpp"
#include "advprobe/session.hpp"

namespace fs = std::filesystem;
using namespace advprobe;

namespace {

struct TaskOptions {
    std::string task = "bandit";
    std::optional<int> trials, budget, target_arm, rounds, endowment, multiplier;

    void add(CLI::App* app, bool with_kind = true) {
        if (with_kind) app->add_option("--task", task, "bandit or trust")->check(CLI::IsMember({"bandit", "trust", "mrtt"}));
        app->add_option("--trials", trials, "bandit trials per episode");
        app->add_option("--budget", budget, "bandit allocations per arm");
        app->add_option("--target-arm", target_arm, "bandit target arm (0 or 1)");
        app->add_option("--rounds", rounds, "trust rounds per episode");
        app->add_option("--endowment", endowment, "trust endowment per round");
        app->add_option("--multiplier", multiplier, "trust multiplier");
    }

    TaskSpec apply(TaskSpec t) const {
        if (trials) t.bandit.trials = *trials;
        if (budget) t.bandit.budget_per_arm = *budget;
        if (target_arm) t.bandit.target_arm = *target_arm;
        if (rounds) t.trust.rounds = *rounds;
        if (endowment) t.trust.endowment = *endowment;
        if (multiplier) t.trust.multiplier = *multiplier;
        t.validate();
        return t;
    }

    TaskSpec build() const {
        TaskSpec t;
        t.kind = parse_task(task);
        return apply(t);
    }
};

struct SubjectOptions {
    std::string kind = "wsls";
    SyntheticPolicy policy;
    LlmConfig llm;
    std::string templates_dir;

    void add(CLI::App* app) {
        app->add_option("--subject", kind, "wsls, rw-softmax, sticky or llm")->required();
        app->add_option("--rw-alpha", policy.rw.alpha, "rw-softmax learning rate");
        app->add_option("--rw-beta", policy.rw.beta, "rw-softmax inverse temperature");
        app->add_option("--sticky-exploration", policy.sticky.exploration_trials, "sticky: latest commitment trial");
        app->add_option("--sticky-stickiness", policy.sticky.stickiness, "sticky: repeat probability");
        app->add_option("--llm-url", llm.base_url, "chat endpoint base URL");
        app->add_option("--llm-path", llm.path, "chat endpoint path");
        app->add_option("--llm-model", llm.model, "model name");
        app->add_option("--llm-temperature", llm.temperature, "sampling temperature");
        app->add_option("--llm-timeout", llm.timeout_seconds, "request timeout in seconds");
        app->add_option("--llm-retries", llm.retry_limit, "re-prompts after an unparseable reply");
        app->add_option("--llm-api-key-env", llm.api_key_env, "environment variable holding the API key");
        app->add_option("--llm-transcript", llm.transcript_path, "prompt transcript file (NDJSON, appended)");
        app->add_option("--templates", templates_dir, "directory of prompt templates");
    }

    std::unique_ptr<Subject> build(const TaskSpec& task) {
        policy.kind = parse_subject_kind(kind);
        if (policy.kind == SubjectKind::llm) {
            const PromptTemplates tpl = templates_dir.empty() ? PromptTemplates{} : PromptTemplates::load(templates_dir);
            return std::make_unique<LlmSubject>(task, llm, tpl, nullptr);
        }
        if (policy.kind == SubjectKind::human_proxy)
            throw InvalidInput("human subjects play through `serve`, not offline commands");
        return make_synthetic_subject(task, policy);
    }
};

fs::path parent_or_cwd(const fs::path& p) { return p.has_parent_path() ? p.parent_path() : fs::path("."); }

fs::path default_manifest(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

/// Loads the learner and (unless "random") the adversary, checking that they
/// belong together.
struct LoadedModels {
    std::optional<LearnerCheckpoint> learner;
    AdversaryHandle adversary = RandomAdversary{};
    std::optional<AdversaryCheckpoint> adversary_ckpt;
};

LoadedModels load_models(const std::string& learner_path, const std::string& adversary_ref) {
    LoadedModels m;
    if (!learner_path.empty()) m.learner = load_learner(learner_path);
    if (adversary_ref != "random") {
        m.adversary_ckpt = load_adversary(adversary_ref);
        if (!m.learner) throw InvalidInput("a trained adversary needs --learner");
        if (!m.adversary_ckpt->learner_digest.empty() && m.adversary_ckpt->learner_digest != m.learner->digest)
            throw InvalidInput("adversary " + adversary_ref + " was trained against a different learner");
        m.adversary = TrainedAdversary{m.adversary_ckpt->qnet, m.adversary_ckpt->objective};
    }
    return m;
}

/// Writes completed episodes to `out` and aborted ones next to it.
void write_logs(const fs::path& out, std::span<const EpisodeLog> logs, RunManifest& manifest, const std::string& phase) {
    const auto done = completed(logs);
    write_ndjson_file(out, done);
    manifest.record_artifact(phase + ".log", out);
    if (done.size() != logs.size()) {
        std::vector<EpisodeLog> aborted;
        for (const auto& e : logs)
            if (e.aborted) aborted.push_back(e);
        const fs::path ab(out.string() + ".aborted.ndjson");
        write_ndjson_file(ab, aborted);
        manifest.record_artifact(phase + ".aborted", ab);
        std::cerr << aborted.size() << " episode(s) aborted; see " << ab << "\n";
    }
}

void write_text(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFound("cannot write " + p.string());
    out << text;
}

TaskSpec task_of_logs(std::span<const EpisodeLog> logs, const TaskOptions& opts) {
    if (logs.empty()) throw InvalidInput("no episodes in data");
    TaskSpec t;
    t.kind = logs.front().task;
    if (t.kind == TaskKind::bandit)
        t.bandit.trials = static_cast<int>(logs.front().trials.size());
    else
        t.trust.rounds = static_cast<int>(logs.front().trials.size());
    for (const auto& e : logs)
        if (e.task != t.kind) throw DataCorruption("data mixes tasks");
    return opts.apply(t);
}

// ---------------------------------------------------------------------------

int cmd_collect(TaskOptions& topt, SubjectOptions& sopt, const std::string& adversary_ref,
                const std::string& learner_path, int episodes, std::uint64_t seed, const fs::path& out,
                fs::path manifest_path) {
    auto models = load_models(learner_path, adversary_ref);
    TaskSpec task = models.adversary_ckpt ? topt.apply(models.adversary_ckpt->task)
                    : models.learner      ? topt.apply(models.learner->task)
                                          : topt.build();
    if (models.learner && models.learner->task.kind != task.kind) task = topt.apply(models.learner->task);
    auto subject = sopt.build(task);
    const auto logs = collect_episodes(task, *subject, models.adversary, models.learner ? &models.learner->params : nullptr,
                                       episodes, seed);
    if (manifest_path.empty()) manifest_path = default_manifest(out);
    RunManifest manifest(manifest_path);
    manifest.set_config("collect", {{"task", task_json(task)},
                                    {"subject", subject->id()},
                                    {"adversary", adversary_ref},
                                    {"learner", learner_path},
                                    {"episodes", episodes}});
    manifest.set_seed("collect", seed);
    write_logs(out, logs, manifest, "collect");
    manifest.mark_phase("collect");
    manifest.save();
    std::cout << "wrote " << completed(logs).size() << " episode(s) to " << out.string() << "\n";
    return 0;
}

int cmd_train_learner(const TaskOptions& topt, const fs::path& data, LearnerConfig cfg, const fs::path& out,
                      fs::path manifest_path) {
    const auto lock = DirectoryLock::acquire_training(parent_or_cwd(out));
    const auto logs = read_ndjson_file(data);
    const TaskSpec task = task_of_logs(logs, topt);
    if (manifest_path.empty()) manifest_path = default_manifest(out);
    RunManifest manifest(manifest_path);
    manifest.record_artifact("train-learner.data", data);
    const auto fit = fit_learner(logs, task, cfg, out, &manifest);
    std::cout << "epochs " << fit.report.epochs.size() << ", best epoch " << fit.report.best_epoch
              << ", holdout nll " << fit.report.best_holdout_nll << ", holdout accuracy "
              << fit.report.holdout_accuracy << "\n";
    return 0;
}

int cmd_train_adversary(const TaskOptions& topt, const fs::path& learner_path, const std::string& objective_name,
                        DqnConfig cfg, const fs::path& out, fs::path manifest_path) {
    const auto lock = DirectoryLock::acquire_training(parent_or_cwd(out));
    const auto learner = load_learner(learner_path);
    const Objective objective = parse_objective(objective_name);
    const TaskSpec task = topt.apply(learner.task);
    const auto trained = train_adversary_loop(learner.params, task, objective, cfg);
    if (trained.diverged) throw TrainingDivergence(trained.divergence_reason);
    const nlohmann::json training = {{"config", to_json(cfg)},
                                     {"curve", trained.curve},
                                     {"updates", trained.updates},
                                     {"last_loss", trained.last_loss}};
    auto ckpt = make_qnet_checkpoint(trained.adversary.qnet, objective, task, learner.digest, training);
    save_checkpoint(out, ckpt);
    if (manifest_path.empty()) manifest_path = default_manifest(out);
    RunManifest manifest(manifest_path);
    manifest.set_config("train-adversary", {{"dqn", to_json(cfg)},
                                            {"objective", std::string(to_string(objective))},
                                            {"task", task_json(task)}});
    manifest.set_seed("train-adversary", cfg.seed);
    manifest.record_artifact("train-adversary.learner", learner_path);
    manifest.record_artifact("adversary", out);
    manifest.mark_phase("train-adversary");
    manifest.save();
    std::cout << "updates " << trained.updates << ", learning curve:";
    for (double c : trained.curve) std::cout << ' ' << c;
    std::cout << "\n";
    return 0;
}

int cmd_evaluate(TaskOptions& topt, SubjectOptions& sopt, const std::string& adversary_ref,
                 const std::string& learner_path, int episodes, std::uint64_t seed, const fs::path& report_path,
                 const fs::path& log_path, fs::path manifest_path) {
    auto models = load_models(learner_path, adversary_ref);
    TaskSpec task = models.adversary_ckpt ? topt.apply(models.adversary_ckpt->task)
                    : models.learner      ? topt.apply(models.learner->task)
                                          : topt.build();
    auto subject = sopt.build(task);
    const auto logs = collect_episodes(task, *subject, models.adversary, models.learner ? &models.learner->params : nullptr,
                                       episodes, seed);
    nlohmann::json report = metrics_report(task, logs);
    report["adversary"] = adversary_ref;
    report["subject"] = subject->id();
    report["seed"] = seed;
    if (models.learner) report["learner_digest"] = models.learner->digest;
    if (models.adversary_ckpt) {
        report["adversary_digest"] = models.adversary_ckpt->digest;
        report["objective"] = std::string(to_string(models.adversary_ckpt->objective));
    }
    write_text(report_path, report.dump(2) + "\n");
    if (manifest_path.empty()) manifest_path = default_manifest(report_path);
    RunManifest manifest(manifest_path);
    manifest.set_config("evaluate", {{"task", task_json(task)},
                                     {"subject", subject->id()},
                                     {"adversary", adversary_ref},
                                     {"learner", learner_path},
                                     {"episodes", episodes}});
    manifest.set_seed("evaluate", seed);
    if (!log_path.empty()) write_logs(log_path, logs, manifest, "evaluate");
    manifest.record_artifact("evaluate.report", report_path);
    manifest.mark_phase("evaluate");
    manifest.save();
    std::cout << "report written to " << report_path.string() << "\n";
    return 0;
}

int cmd_report(const TaskOptions& topt, const fs::path& data, const std::string& format, const fs::path& out) {
    const auto logs = read_ndjson_file(data);
    const TaskSpec task = task_of_logs(logs, topt);
    std::string text;
    if (format == "json") {
        text = metrics_report(task, logs).dump(2) + "\n";
    } else if (task.kind == TaskKind::bandit) {
        text = to_csv(bandit_metrics(logs, task.bandit.target_arm));
    } else {
        text = to_csv(trust_metrics(logs, task.trust));
    }
    if (out.empty())
        std::cout << text;
    else
        write_text(out, text);
    return 0;
}

httplib::Server* g_server = nullptr;

int cmd_serve(int port, const std::string& bind, const std::string& learner, const std::string& adversary,
              fs::path checkpoint_dir, const std::string& log_dir) {
    if (checkpoint_dir.empty()) checkpoint_dir = learner.empty() ? fs::path(".") : parent_or_cwd(learner);
    const auto lock = DirectoryLock::acquire_serving(checkpoint_dir);
    SessionServiceConfig cfg;
    cfg.default_learner = learner.empty() ? "" : fs::absolute(learner).string();
    cfg.default_adversary = adversary == "random" ? adversary : fs::absolute(adversary).string();
    if (!log_dir.empty()) cfg.log_dir = log_dir;
    // Fail early on bad default checkpoints.
    load_models(cfg.default_learner, cfg.default_adversary);
    SessionManager manager(cfg);
    httplib::Server server;
    install_session_routes(server, manager);
    g_server = &server;
    std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
    std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
    int bound = port;
    if (port == 0) {
        bound = server.bind_to_any_port(bind);
        if (bound < 0) throw ConfigError("cannot bind " + bind);
    } else if (!server.bind_to_port(bind, port)) {
        throw ConfigError("cannot bind " + bind + ":" + std::to_string(port));
    }
    std::cout << "listening on http://" << bind << ":" << bound << std::endl;
    server.listen_after_bind();
    return 0;
}

int exit_code_for(const Error& e) {
    const std::string_view k = e.kind();
    if (k == "invalid-input" || k == "configuration") return 2;
    if (k == "not-found") return 3;
    if (k == "conflict") return 4;
    if (k == "data-corruption" || k == "version") return 5;
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Adversarial probing of sequential decision makers"};
    app.require_subcommand(1);

    // collect
    auto* collect = app.add_subcommand("collect", "run a subject against an adversary and log episodes");
    TaskOptions c_task;
    SubjectOptions c_subject;
    std::string c_adversary = "random", c_learner;
    int c_episodes = 100;
    std::uint64_t c_seed = 0;
    std::string c_out, c_manifest;
    c_task.add(collect);
    c_subject.add(collect);
    collect->add_option("--adversary", c_adversary, "random or an adversary checkpoint");
    collect->add_option("--learner", c_learner, "learner checkpoint (needed by trained adversaries)");
    collect->add_option("--episodes", c_episodes, "episodes to run")->check(CLI::PositiveNumber);
    collect->add_option("--seed", c_seed, "base seed");
    collect->add_option("--out", c_out, "NDJSON episode log")->required();
    collect->add_option("--manifest", c_manifest, "run manifest (default <out>.manifest.json)");

    // train-learner
    auto* tl = app.add_subcommand("train-learner", "fit the learner model to episode logs");
    TaskOptions tl_task;
    LearnerConfig tl_cfg;
    std::string tl_data, tl_out, tl_manifest;
    tl_task.add(tl, false);
    tl->add_option("--data", tl_data, "NDJSON episode log")->required();
    tl->add_option("--hidden", tl_cfg.hidden_dim, "hidden units");
    tl->add_option("--epochs", tl_cfg.epochs, "maximum epochs");
    tl->add_option("--patience", tl_cfg.patience, "early-stopping patience in epochs");
    tl->add_option("--batch", tl_cfg.batch_size, "episodes per minibatch");
    tl->add_option("--lr", tl_cfg.lr, "Adam learning rate");
    tl->add_option("--clip", tl_cfg.clip, "gradient-norm clip");
    tl->add_option("--holdout", tl_cfg.holdout_fraction, "held-out fraction of episodes");
    tl->add_option("--seed", tl_cfg.seed, "seed");
    tl->add_option("--out", tl_out, "learner checkpoint")->required();
    tl->add_option("--manifest", tl_manifest, "run manifest (default <out>.manifest.json)");

    // train-adversary
    auto* ta = app.add_subcommand("train-adversary", "train a Q-network adversary against a learner model");
    TaskOptions ta_task;
    DqnConfig ta_cfg;
    std::string ta_learner, ta_objective, ta_out, ta_manifest;
    ta_task.add(ta, false);
    ta->add_option("--learner", ta_learner, "learner checkpoint")->required();
    ta->add_option("--objective", ta_objective, "target, max or fair")
        ->required()
        ->check(CLI::IsMember({"target", "max", "fair"}));
    ta->add_option("--episodes", ta_cfg.episodes, "training episodes");
    ta->add_option("--hidden1", ta_cfg.hidden1, "first hidden layer width");
    ta->add_option("--hidden2", ta_cfg.hidden2, "second hidden layer width");
    ta->add_option("--gamma", ta_cfg.gamma, "discount");
    ta->add_option("--buffer", ta_cfg.buffer, "replay capacity");
    ta->add_option("--batch", ta_cfg.batch, "minibatch size");
    ta->add_option("--target-sync", ta_cfg.target_sync, "updates between target-network copies");
    ta->add_option("--eps-start", ta_cfg.epsilon_start, "initial exploration rate");
    ta->add_option("--eps-end", ta_cfg.epsilon_end, "final exploration rate");
    ta->add_option("--eps-decay", ta_cfg.epsilon_decay_fraction, "share of episodes over which epsilon decays");
    ta->add_option("--lr", ta_cfg.lr, "Adam learning rate");
    ta->add_option("--train-every", ta_cfg.train_every, "environment steps per update");
    ta->add_option("--warmup", ta_cfg.warmup, "transitions before the first update");
    ta->add_option("--reward-scale", ta_cfg.reward_scale, "reward multiplier");
    ta->add_option("--curve-window", ta_cfg.curve_window, "episodes per learning-curve point");
    ta->add_option("--seed", ta_cfg.seed, "seed");
    ta->add_option("--out", ta_out, "adversary checkpoint")->required();
    ta->add_option("--manifest", ta_manifest, "run manifest (default <out>.manifest.json)");

    // evaluate
    auto* ev = app.add_subcommand("evaluate", "run a greedy adversary against a live subject");
    TaskOptions ev_task;
    SubjectOptions ev_subject;
    std::string ev_adversary, ev_learner, ev_report, ev_log, ev_manifest;
    int ev_episodes = 200;
    std::uint64_t ev_seed = 0;
    ev_task.add(ev);
    ev_subject.add(ev);
    ev->add_option("--adversary", ev_adversary, "adversary checkpoint or random")->required();
    ev->add_option("--learner", ev_learner, "learner checkpoint");
    ev->add_option("--episodes", ev_episodes, "episodes")->check(CLI::PositiveNumber);
    ev->add_option("--seed", ev_seed, "base seed");
    ev->add_option("--report", ev_report, "JSON metrics report")->required();
    ev->add_option("--log", ev_log, "NDJSON episode log");
    ev->add_option("--manifest", ev_manifest, "run manifest (default <report>.manifest.json)");

    // report
    auto* rp = app.add_subcommand("report", "summarize episode logs");
    TaskOptions rp_task;
    std::string rp_data, rp_format = "json", rp_out;
    rp_task.add(rp, false);
    rp->add_option("--data", rp_data, "NDJSON episode log")->required();
    rp->add_option("--format", rp_format, "json or csv")->check(CLI::IsMember({"json", "csv"}));
    rp->add_option("--out", rp_out, "output file (default stdout)");

    // serve
    auto* sv = app.add_subcommand("serve", "HTTP session service for human subjects");
    int sv_port = 8080;
    std::string sv_bind = "127.0.0.1", sv_learner, sv_adversary = "random", sv_ckpt_dir, sv_log_dir;
    sv->add_option("--port", sv_port, "port (0 picks a free one)");
    sv->add_option("--bind", sv_bind, "bind address");
    sv->add_option("--learner", sv_learner, "default learner checkpoint");
    sv->add_option("--adversary", sv_adversary, "default adversary checkpoint or random");
    sv->add_option("--checkpoint-dir", sv_ckpt_dir, "checkpoint directory (default: the learner's)");
    sv->add_option("--log-dir", sv_log_dir, "write finished sessions here as NDJSON");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*collect)
            return cmd_collect(c_task, c_subject, c_adversary, c_learner, c_episodes, c_seed, c_out, c_manifest);
        if (*tl) return cmd_train_learner(tl_task, tl_data, tl_cfg, tl_out, tl_manifest);
        if (*ta) return cmd_train_adversary(ta_task, ta_learner, ta_objective, ta_cfg, ta_out, ta_manifest);
        if (*ev)
            return cmd_evaluate(ev_task, ev_subject, ev_adversary, ev_learner, ev_episodes, ev_seed, ev_report, ev_log,
                                ev_manifest);
        if (*rp) return cmd_report(rp_task, rp_data, rp_format, rp_out);
        if (*sv) return cmd_serve(sv_port, sv_bind, sv_learner, sv_adversary, sv_ckpt_dir, sv_log_dir);
    } catch (const Error& e) {
        std::cerr << "error (" << e.kind() << "): " << e.what() << "\n";
        return exit_code_for(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
