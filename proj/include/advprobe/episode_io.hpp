#pragma once

// Episode logs as newline-delimited JSON, one object per trial:
//   {"ep","t","task","subject","a","r","obs",
//    "alloc":[a0,a1]                      (bandit)
//    "invest","repay","repay_q"           (trust)
//    "seed", "h" (optional hidden state)}
// Quarter-unit integers carry a "_q" suffix.

#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "advprobe/episode.hpp"

namespace advprobe {

inline nlohmann::json observation_json(const Observation& obs) {
    if (const auto* b = std::get_if<BanditObservation>(&obs)) return {{"outcome", b->outcome}};
    if (const auto* t = std::get_if<TrustObservation>(&obs))
        return {{"repay_action", t->repay_action},
                {"repay_fraction", t->repay_fraction},
                {"received_q", t->received_q},
                {"repayment_q", t->repayment_q},
                {"investor_total_q", t->investor_total_q},
                {"trustee_total_q", t->trustee_total_q}};
    return nlohmann::json::object();
}

inline nlohmann::json trial_json(const EpisodeLog& ep, const TrialRecord& r) {
    nlohmann::json j;
    j["ep"] = ep.episode;
    j["t"] = r.t;
    j["task"] = std::string(to_string(ep.task));
    j["subject"] = ep.subject;
    j["a"] = r.action;
    j["r"] = r.reward;
    j["obs"] = observation_json(r.observation);
    if (ep.task == TaskKind::bandit) {
        j["alloc"] = {r.allocation[0] ? 1 : 0, r.allocation[1] ? 1 : 0};
    } else {
        j["invest"] = r.action;
        j["repay"] = r.repay_action;
        j["repay_q"] = r.repayment_q;
    }
    j["seed"] = ep.seed;
    if (!r.hidden.empty()) j["h"] = r.hidden;
    return j;
}

inline void write_episode(std::ostream& out, const EpisodeLog& ep) {
    for (const auto& r : ep.trials) out << trial_json(ep, r).dump() << '\n';
}

inline void write_ndjson(std::ostream& out, std::span<const EpisodeLog> episodes) {
    for (const auto& e : episodes) write_episode(out, e);
}

inline std::string to_ndjson(std::span<const EpisodeLog> episodes) {
    std::ostringstream os;
    write_ndjson(os, episodes);
    return os.str();
}

inline void write_ndjson_file(const std::filesystem::path& path, std::span<const EpisodeLog> episodes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw NotFound("cannot write " + path.string());
    write_ndjson(out, episodes);
}

/// Parses an NDJSON log. Trials of one episode must be consecutive lines with
/// t = 1, 2, ...; anything else raises DataCorruption.
inline std::vector<EpisodeLog> read_ndjson(std::istream& in) {
    std::vector<EpisodeLog> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto bad = [&](const std::string& why) {
            return DataCorruption("episode log line " + std::to_string(lineno) + ": " + why);
        };
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw bad(e.what());
        }
        try {
            const int ep = j.at("ep").get<int>();
            const int t = j.at("t").get<int>();
            const TaskKind task = parse_task(j.at("task").get<std::string>());
            if (out.empty() || out.back().episode != ep) {
                if (t != 1) throw bad("episode " + std::to_string(ep) + " does not start at t=1");
                EpisodeLog e;
                e.task = task;
                e.episode = ep;
                e.subject = j.at("subject").get<std::string>();
                e.seed = j.at("seed").get<std::uint64_t>();
                out.push_back(std::move(e));
            }
            auto& e = out.back();
            if (e.task != task) throw bad("task changes within an episode");
            if (t != static_cast<int>(e.trials.size()) + 1) throw bad("trial indices not contiguous");
            TrialRecord r;
            r.t = t;
            r.action = j.at("a").get<int>();
            r.reward = j.at("r").get<double>();
            const auto& obs = j.at("obs");
            if (task == TaskKind::bandit) {
                const auto alloc = j.at("alloc");
                if (!alloc.is_array() || alloc.size() != 2) throw bad("alloc must have two entries");
                r.allocation = {alloc[0].get<int>() != 0, alloc[1].get<int>() != 0};
                if (obs.contains("outcome")) r.observation = BanditObservation{obs.at("outcome").get<int>()};
            } else {
                r.repay_action = j.at("repay").get<int>();
                r.repayment_q = j.at("repay_q").get<std::int64_t>();
                if (j.at("invest").get<int>() != r.action) throw bad("invest and a disagree");
                TrustObservation o;
                o.repay_action = obs.value("repay_action", r.repay_action);
                o.repay_fraction = obs.value("repay_fraction", 0.0);
                o.received_q = obs.value("received_q", std::int64_t{0});
                o.repayment_q = obs.value("repayment_q", r.repayment_q);
                o.investor_total_q = obs.value("investor_total_q", std::int64_t{0});
                o.trustee_total_q = obs.value("trustee_total_q", std::int64_t{0});
                r.observation = o;
            }
            if (j.contains("h")) r.hidden = j.at("h").get<Vector>();
            e.trials.push_back(std::move(r));
        } catch (const nlohmann::json::exception& ex) {
            throw bad(ex.what());
        } catch (const InvalidInput& ex) {
            throw bad(ex.what());
        }
    }
    return out;
}

inline std::vector<EpisodeLog> read_ndjson_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw NotFound("cannot open episode log " + path.string());
    return read_ndjson(in);
}

}  // namespace advprobe
