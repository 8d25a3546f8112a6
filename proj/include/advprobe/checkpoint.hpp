#pragma once

// JSON checkpoints:
//   {"version":1, "kind":"learner"|"qnet", "dims":{...},
//    "weights":{block:[...]}, "config":{...}, "digest":"<sha256 hex>"}
// The digest covers the canonical dump of every other field.

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <json.hpp>

#include "advprobe/adversary.hpp"
#include "advprobe/digest.hpp"
#include "advprobe/learner.hpp"

namespace advprobe {

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    int version = kCheckpointVersion;
    std::string kind;
    nlohmann::json dims = nlohmann::json::object();
    std::map<std::string, Vector> weights;
    nlohmann::json config = nlohmann::json::object();
    std::string digest;
};

inline nlohmann::json checkpoint_payload(const Checkpoint& c) {
    nlohmann::json w = nlohmann::json::object();
    for (const auto& [name, values] : c.weights) w[name] = values;
    return {{"version", c.version}, {"kind", c.kind}, {"dims", c.dims}, {"weights", w}, {"config", c.config}};
}

inline std::string checkpoint_digest(const Checkpoint& c) { return sha256_hex(checkpoint_payload(c).dump()); }

inline std::string serialize_checkpoint(Checkpoint& c) {
    for (const auto& [name, values] : c.weights)
        if (!all_finite(values)) throw InvalidInput("checkpoint: block '" + name + "' has non-finite values");
    c.digest = checkpoint_digest(c);
    auto j = checkpoint_payload(c);
    j["digest"] = c.digest;
    return j.dump();
}

inline void save_checkpoint(const std::filesystem::path& path, Checkpoint& c) {
    const std::string text = serialize_checkpoint(c);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFound("cannot write checkpoint " + path.string());
    out << text << '\n';
}

inline Checkpoint parse_checkpoint(const std::string& text, const std::string& origin = "checkpoint") {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw DataCorruption(origin + " is not valid JSON: " + e.what());
    }
    Checkpoint c;
    try {
        c.version = j.at("version").get<int>();
        if (c.version != kCheckpointVersion)
            throw VersionError(origin + " has format version " + std::to_string(c.version) + ", expected " +
                               std::to_string(kCheckpointVersion));
        c.kind = j.at("kind").get<std::string>();
        c.dims = j.at("dims");
        for (const auto& [name, values] : j.at("weights").items()) c.weights[name] = values.get<Vector>();
        c.config = j.at("config");
        c.digest = j.at("digest").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw DataCorruption(origin + " is missing fields: " + e.what());
    }
    if (checkpoint_digest(c) != c.digest) throw DataCorruption(origin + " digest mismatch");
    return c;
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw NotFound("checkpoint not found: " + path.string());
    return parse_checkpoint(read_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Task <-> JSON
// ---------------------------------------------------------------------------

inline nlohmann::json task_json(const TaskSpec& t) {
    if (t.kind == TaskKind::bandit)
        return {{"task", "bandit"},
                {"trials", t.bandit.trials},
                {"budget_per_arm", t.bandit.budget_per_arm},
                {"target_arm", t.bandit.target_arm},
                {"reward_prob_random", t.bandit.reward_prob_random}};
    return {{"task", "trust"},
            {"rounds", t.trust.rounds},
            {"endowment", t.trust.endowment},
            {"multiplier", t.trust.multiplier},
            {"repay_quarters", t.trust.repay_quarters}};
}

inline TaskSpec task_from_json(const nlohmann::json& j) {
    TaskSpec t;
    t.kind = parse_task(j.at("task").get<std::string>());
    if (t.kind == TaskKind::bandit) {
        t.bandit.trials = j.value("trials", t.bandit.trials);
        t.bandit.budget_per_arm = j.value("budget_per_arm", t.bandit.budget_per_arm);
        t.bandit.target_arm = j.value("target_arm", t.bandit.target_arm);
        t.bandit.reward_prob_random = j.value("reward_prob_random", t.bandit.reward_prob_random);
    } else {
        t.trust.rounds = j.value("rounds", t.trust.rounds);
        t.trust.endowment = j.value("endowment", t.trust.endowment);
        t.trust.multiplier = j.value("multiplier", t.trust.multiplier);
        t.trust.repay_quarters = j.value("repay_quarters", t.trust.repay_quarters);
    }
    t.validate();
    return t;
}

// ---------------------------------------------------------------------------
// Learner / Q-network checkpoints
// ---------------------------------------------------------------------------

struct LearnerCheckpoint {
    LearnerParams params;
    TaskSpec task;
    std::string digest;
};

inline Checkpoint make_learner_checkpoint(const LearnerParams& p, const TaskSpec& task,
                                          const nlohmann::json& training = nlohmann::json::object()) {
    Checkpoint c;
    c.kind = "learner";
    c.dims = {{"input", p.input_dim()}, {"hidden", p.hidden_dim()}, {"actions", p.action_dim()}};
    for (std::size_t b = 0; b < LearnerParams::kBlocks; ++b) {
        const auto blk = p.block(static_cast<LearnerParams::Block>(b));
        c.weights[LearnerParams::kBlockNames[b]] = Vector(blk.begin(), blk.end());
    }
    c.config = {{"task", task_json(task)}, {"training", training}};
    return c;
}

template <typename Params>
void fill_blocks(Params& p, const Checkpoint& c) {
    for (std::size_t b = 0; b < Params::kBlocks; ++b) {
        const char* name = Params::kBlockNames[b];
        const auto it = c.weights.find(name);
        if (it == c.weights.end()) throw DataCorruption(std::string("checkpoint lacks block ") + name);
        auto dst = p.block(static_cast<typename Params::Block>(b));
        if (it->second.size() != dst.size())
            throw DataCorruption(std::string("checkpoint block ") + name + " has the wrong size");
        std::copy(it->second.begin(), it->second.end(), dst.begin());
    }
}

inline LearnerCheckpoint learner_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "learner") throw InvalidInput("expected a learner checkpoint, got '" + c.kind + "'");
    LearnerCheckpoint out;
    try {
        out.params = LearnerParams(c.dims.at("input").get<std::size_t>(), c.dims.at("hidden").get<std::size_t>(),
                                   c.dims.at("actions").get<std::size_t>());
        out.task = task_from_json(c.config.at("task"));
    } catch (const nlohmann::json::exception& e) {
        throw DataCorruption(std::string("learner checkpoint: ") + e.what());
    }
    fill_blocks(out.params, c);
    out.digest = c.digest;
    return out;
}

struct AdversaryCheckpoint {
    QNetParams qnet;
    Objective objective = Objective::target;
    TaskSpec task;
    std::string learner_digest;  // digest of the learner checkpoint it was trained against
    std::string digest;
};

inline Checkpoint make_qnet_checkpoint(const QNetParams& q, Objective objective, const TaskSpec& task,
                                       const std::string& learner_digest,
                                       const nlohmann::json& training = nlohmann::json::object()) {
    Checkpoint c;
    c.kind = "qnet";
    c.dims = {{"input", q.input_dim()}, {"hidden1", q.hidden1()}, {"hidden2", q.hidden2()}, {"actions", q.action_count()}};
    for (std::size_t b = 0; b < QNetParams::kBlocks; ++b) {
        const auto blk = q.block(static_cast<QNetParams::Block>(b));
        c.weights[QNetParams::kBlockNames[b]] = Vector(blk.begin(), blk.end());
    }
    c.config = {{"objective", std::string(to_string(objective))},
                {"task", task_json(task)},
                {"learner_digest", learner_digest},
                {"training", training}};
    return c;
}

inline AdversaryCheckpoint adversary_from_checkpoint(const Checkpoint& c) {
    if (c.kind != "qnet") throw InvalidInput("expected a qnet checkpoint, got '" + c.kind + "'");
    AdversaryCheckpoint out;
    try {
        out.qnet = QNetParams(c.dims.at("input").get<std::size_t>(), c.dims.at("hidden1").get<std::size_t>(),
                              c.dims.at("hidden2").get<std::size_t>(), c.dims.at("actions").get<std::size_t>());
        out.objective = parse_objective(c.config.at("objective").get<std::string>());
        out.task = task_from_json(c.config.at("task"));
        out.learner_digest = c.config.value("learner_digest", std::string());
    } catch (const nlohmann::json::exception& e) {
        throw DataCorruption(std::string("qnet checkpoint: ") + e.what());
    }
    fill_blocks(out.qnet, c);
    out.digest = c.digest;
    return out;
}

inline LearnerCheckpoint load_learner(const std::filesystem::path& p) { return learner_from_checkpoint(load_checkpoint(p)); }
inline AdversaryCheckpoint load_adversary(const std::filesystem::path& p) {
    return adversary_from_checkpoint(load_checkpoint(p));
}

}  // namespace advprobe
