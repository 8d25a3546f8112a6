#pragma once

// Behavioural statistics over episode logs.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "advprobe/episode.hpp"

namespace advprobe {

struct Summary {
    double mean = 0.0;
    double sd = 0.0;   // sample standard deviation; 0 when n < 2
    std::size_t n = 0;
};

inline Summary summarize(std::span<const double> xs) {
    Summary s;
    s.n = xs.size();
    if (xs.empty()) return s;
    for (double x : xs) s.mean += x;
    s.mean /= static_cast<double>(xs.size());
    if (xs.size() > 1) {
        double ss = 0.0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.sd = std::sqrt(ss / static_cast<double>(xs.size() - 1));
    }
    return s;
}

inline Summary summarize(const std::vector<std::optional<double>>& xs) {
    std::vector<double> present;
    for (const auto& x : xs)
        if (x) present.push_back(*x);
    return summarize(present);
}

// ---------------------------------------------------------------------------
// Bandit
// ---------------------------------------------------------------------------

struct BanditEpisodeMetrics {
    double reward_rate = 0.0;
    double target_rate = 0.0;
    std::optional<double> no_reward_switch_rate;  // empty when no unrewarded trial precedes another
    std::optional<double> reward_switch_rate;
    double consistency_index = 0.0;  // share of trials on the episode's modal arm
};

struct BanditMetrics {
    std::vector<BanditEpisodeMetrics> episodes;
    Summary reward_rate, target_rate, no_reward_switch_rate, reward_switch_rate, consistency_index;
};

/// Switch rates only condition on trials t > `after_trial` (1-based), so
/// `after_trial = E` restricts them to the post-exploration phase.
inline BanditEpisodeMetrics bandit_episode_metrics(const EpisodeLog& e, int target_arm = 0, int after_trial = 0) {
    BanditEpisodeMetrics m;
    const auto& tr = e.trials;
    if (tr.empty()) throw InvalidInput("bandit_metrics: empty episode");
    std::array<int, 2> counts{};
    int rewards = 0, nr_total = 0, nr_switch = 0, r_total = 0, r_switch = 0;
    for (std::size_t i = 0; i < tr.size(); ++i) {
        if (tr[i].action != 0 && tr[i].action != 1) throw DataCorruption("bandit_metrics: action out of range");
        ++counts[tr[i].action];
        if (tr[i].reward > 0) ++rewards;
        if (i == 0 || tr[i].t <= after_trial) continue;
        const bool switched = tr[i].action != tr[i - 1].action;
        if (tr[i - 1].reward > 0) {
            ++r_total;
            r_switch += switched;
        } else {
            ++nr_total;
            nr_switch += switched;
        }
    }
    const double n = static_cast<double>(tr.size());
    m.reward_rate = rewards / n;
    m.target_rate = counts[target_arm] / n;
    if (nr_total > 0) m.no_reward_switch_rate = static_cast<double>(nr_switch) / nr_total;
    if (r_total > 0) m.reward_switch_rate = static_cast<double>(r_switch) / r_total;
    m.consistency_index = std::max(counts[0], counts[1]) / n;
    return m;
}

inline BanditMetrics bandit_metrics(std::span<const EpisodeLog> episodes, int target_arm = 0, int after_trial = 0) {
    if (episodes.empty()) throw InvalidInput("bandit_metrics: no episodes");
    BanditMetrics out;
    std::vector<double> rr, trt, ci;
    std::vector<std::optional<double>> nrs, rs;
    for (const auto& e : episodes) {
        if (e.task != TaskKind::bandit) throw InvalidInput("bandit_metrics: non-bandit episode");
        const auto m = bandit_episode_metrics(e, target_arm, after_trial);
        out.episodes.push_back(m);
        rr.push_back(m.reward_rate);
        trt.push_back(m.target_rate);
        ci.push_back(m.consistency_index);
        nrs.push_back(m.no_reward_switch_rate);
        rs.push_back(m.reward_switch_rate);
    }
    out.reward_rate = summarize(rr);
    out.target_rate = summarize(trt);
    out.consistency_index = summarize(ci);
    out.no_reward_switch_rate = summarize(nrs);
    out.reward_switch_rate = summarize(rs);
    return out;
}

// ---------------------------------------------------------------------------
// Trust
// ---------------------------------------------------------------------------

struct TrustEpisodeMetrics {
    double investor_total = 0.0;  // units
    double trustee_total = 0.0;
    double earnings_gap = 0.0;
};

struct TrustMetrics {
    std::vector<TrustEpisodeMetrics> episodes;
    Summary investor_total, trustee_total, earnings_gap;
    std::vector<double> mean_investment_by_round;
    std::vector<std::optional<double>> mean_repayment_pct_by_round;  // empty when nothing was received
};

/// Totals recomputed from (investment, repay action); any record whose
/// repayment or running totals disagree raises DataCorruption.
inline TrustEpisodeMetrics trust_episode_metrics(const EpisodeLog& e, const TrustConfig& cfg) {
    std::int64_t inv_q = 0, tr_q = 0, expected_sum = 0;
    for (const auto& r : e.trials) {
        if (r.action < 0 || r.action > cfg.endowment || r.repay_action < 0 || r.repay_action >= cfg.repay_actions())
            throw DataCorruption("trust_metrics: episode " + std::to_string(e.episode) + " round " +
                                 std::to_string(r.t) + " has out-of-range values");
        const std::int64_t received_q = 4LL * cfg.multiplier * r.action;
        const std::int64_t repay_q = static_cast<std::int64_t>(cfg.repay_quarters[r.repay_action]) * cfg.multiplier * r.action;
        if (repay_q != r.repayment_q)
            throw DataCorruption("trust_metrics: episode " + std::to_string(e.episode) + " round " +
                                 std::to_string(r.t) + " repayment inconsistent with repay action");
        inv_q += 4LL * (cfg.endowment - r.action) + repay_q;
        tr_q += received_q - repay_q;
        expected_sum += 4LL * (cfg.endowment + (cfg.multiplier - 1) * r.action);
        if (const auto* o = std::get_if<TrustObservation>(&r.observation);
            o && (o->investor_total_q != inv_q || o->trustee_total_q != tr_q))
            throw DataCorruption("trust_metrics: episode " + std::to_string(e.episode) + " round " +
                                 std::to_string(r.t) + " violates conservation of earnings");
    }
    if (inv_q + tr_q != expected_sum)
        throw DataCorruption("trust_metrics: episode " + std::to_string(e.episode) + " violates conservation");
    return {quarters_to_units(inv_q), quarters_to_units(tr_q), std::abs(quarters_to_units(inv_q - tr_q))};
}

inline TrustMetrics trust_metrics(std::span<const EpisodeLog> episodes, const TrustConfig& cfg) {
    if (episodes.empty()) throw InvalidInput("trust_metrics: no episodes");
    TrustMetrics out;
    std::vector<double> it, tt, gap;
    std::vector<double> inv_sum(cfg.rounds, 0.0), pct_sum(cfg.rounds, 0.0);
    std::vector<int> inv_n(cfg.rounds, 0), pct_n(cfg.rounds, 0);
    for (const auto& e : episodes) {
        if (e.task != TaskKind::trust) throw InvalidInput("trust_metrics: non-trust episode");
        const auto m = trust_episode_metrics(e, cfg);
        out.episodes.push_back(m);
        it.push_back(m.investor_total);
        tt.push_back(m.trustee_total);
        gap.push_back(m.earnings_gap);
        for (const auto& r : e.trials) {
            const int k = r.t - 1;
            if (k < 0 || k >= cfg.rounds) continue;
            inv_sum[k] += r.action;
            ++inv_n[k];
            if (r.action > 0) {
                pct_sum[k] += 100.0 * static_cast<double>(r.repayment_q) / (4.0 * cfg.multiplier * r.action);
                ++pct_n[k];
            }
        }
    }
    out.investor_total = summarize(it);
    out.trustee_total = summarize(tt);
    out.earnings_gap = summarize(gap);
    for (int k = 0; k < cfg.rounds; ++k) {
        out.mean_investment_by_round.push_back(inv_n[k] ? inv_sum[k] / inv_n[k] : 0.0);
        out.mean_repayment_pct_by_round.push_back(pct_n[k] ? std::optional<double>(pct_sum[k] / pct_n[k])
                                                           : std::nullopt);
    }
    return out;
}

struct RepaymentBin {
    double lo_pct = 0.0;
    double hi_pct = 0.0;
    std::size_t count = 0;
    std::optional<double> mean_investment;
};

/// Mean investment on round t grouped by the repayment proportion of round
/// t-1, in five 20% bins; the last bin [80,100] is closed. A round with
/// nothing received counts as proportion 0.
inline std::vector<RepaymentBin> investment_by_repayment(std::span<const EpisodeLog> episodes) {
    if (episodes.empty()) throw InvalidInput("investment_by_repayment: no episodes");
    std::vector<RepaymentBin> bins(5);
    std::vector<double> sums(5, 0.0);
    for (int b = 0; b < 5; ++b) bins[b] = {20.0 * b, 20.0 * (b + 1), 0, std::nullopt};
    for (const auto& e : episodes) {
        if (e.task != TaskKind::trust) throw InvalidInput("investment_by_repayment: non-trust episode");
        for (std::size_t i = 1; i < e.trials.size(); ++i) {
            const auto& prev = e.trials[i - 1];
            double pct = 0.0;
            if (const auto* o = std::get_if<TrustObservation>(&prev.observation); o && o->received_q > 0)
                pct = 100.0 * static_cast<double>(o->repayment_q) / static_cast<double>(o->received_q);
            const int b = std::min(4, static_cast<int>(std::floor(pct / 20.0)));
            sums[b] += e.trials[i].action;
            ++bins[b].count;
        }
    }
    for (int b = 0; b < 5; ++b)
        if (bins[b].count) bins[b].mean_investment = sums[b] / static_cast<double>(bins[b].count);
    return bins;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

inline nlohmann::json to_json(const Summary& s) { return {{"mean", s.mean}, {"sd", s.sd}, {"n", s.n}}; }

inline nlohmann::json to_json(const BanditEpisodeMetrics& m) {
    return {{"reward_rate", m.reward_rate},
            {"target_rate", m.target_rate},
            {"no_reward_switch_rate", opt_json(m.no_reward_switch_rate)},
            {"reward_switch_rate", opt_json(m.reward_switch_rate)},
            {"consistency_index", m.consistency_index}};
}

inline nlohmann::json to_json(const BanditMetrics& m) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& e : m.episodes) per.push_back(to_json(e));
    return {{"task", "bandit"},
            {"episodes", m.episodes.size()},
            {"reward_rate", to_json(m.reward_rate)},
            {"target_rate", to_json(m.target_rate)},
            {"no_reward_switch_rate", to_json(m.no_reward_switch_rate)},
            {"reward_switch_rate", to_json(m.reward_switch_rate)},
            {"consistency_index", to_json(m.consistency_index)},
            {"per_episode", per}};
}

inline nlohmann::json to_json(const TrustEpisodeMetrics& e) {
    return {{"investor_total", e.investor_total}, {"trustee_total", e.trustee_total}, {"earnings_gap", e.earnings_gap}};
}

inline nlohmann::json to_json(const TrustMetrics& m, std::span<const RepaymentBin> bins = {}) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& e : m.episodes) per.push_back(to_json(e));
    nlohmann::json pct = nlohmann::json::array();
    for (const auto& p : m.mean_repayment_pct_by_round) pct.push_back(opt_json(p));
    nlohmann::json j = {{"task", "trust"},
                        {"episodes", m.episodes.size()},
                        {"investor_total", to_json(m.investor_total)},
                        {"trustee_total", to_json(m.trustee_total)},
                        {"earnings_gap", to_json(m.earnings_gap)},
                        {"mean_investment_by_round", m.mean_investment_by_round},
                        {"mean_repayment_pct_by_round", pct},
                        {"per_episode", per}};
    if (!bins.empty()) {
        nlohmann::json jb = nlohmann::json::array();
        for (const auto& b : bins)
            jb.push_back({{"lo_pct", b.lo_pct}, {"hi_pct", b.hi_pct}, {"count", b.count},
                          {"mean_investment", opt_json(b.mean_investment)}});
        j["investment_by_repayment"] = jb;
    }
    return j;
}

inline std::string csv_cell(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os.precision(17);
    os << *v;
    return os.str();
}

/// One row per episode.
inline std::string to_csv(const BanditMetrics& m) {
    std::string out = "episode,reward_rate,target_rate,no_reward_switch_rate,reward_switch_rate,consistency_index\n";
    for (std::size_t i = 0; i < m.episodes.size(); ++i) {
        const auto& e = m.episodes[i];
        out += std::to_string(i) + "," + csv_cell(e.reward_rate) + "," + csv_cell(e.target_rate) + "," +
               csv_cell(e.no_reward_switch_rate) + "," + csv_cell(e.reward_switch_rate) + "," +
               csv_cell(e.consistency_index) + "\n";
    }
    return out;
}

inline std::string to_csv(const TrustMetrics& m) {
    std::string out = "episode,investor_total,trustee_total,earnings_gap\n";
    for (std::size_t i = 0; i < m.episodes.size(); ++i) {
        const auto& e = m.episodes[i];
        out += std::to_string(i) + "," + csv_cell(e.investor_total) + "," + csv_cell(e.trustee_total) + "," +
               csv_cell(e.earnings_gap) + "\n";
    }
    return out;
}

}  // namespace advprobe
