#pragma once

// Chat prompts for LLM subjects and parsing of their replies. Templates are
// plain text with {{name}} placeholders and can be loaded from a directory.

#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "advprobe/episode.hpp"
#include "advprobe/errors.hpp"
#include "advprobe/tasks.hpp"

namespace advprobe {

struct ChatMessage {
    std::string role;
    std::string content;

    bool operator==(const ChatMessage&) const = default;
};

struct PromptTemplates {
    std::string bandit_system =
        "You are a space explorer. On every trial you visit one of two planets, Planet {{label_x}} or "
        "Planet {{label_y}}, to look for gold coins. A planet may or may not hold a coin on a given trial. "
        "Try to collect as many gold coins as possible over {{trials}} trials.";
    std::string bandit_trial =
        "Trial {{trial}} of {{trials}}.\n{{history}}Which planet do you visit? Answer with "
        "\"Planet {{label_x}}\" or \"Planet {{label_y}}\".";
    std::string trust_system =
        "You are the investor in a trust game lasting {{rounds}} rounds. At the start of each round you "
        "receive {{endowment}} monetary units. You choose how much of them to send to a trustee. The "
        "amount you send is multiplied by {{multiplier}} and the trustee decides how much of it to return "
        "to you. You keep whatever you did not send. Try to earn as much as possible.";
    std::string trust_round =
        "Round {{round}} of {{rounds}}.\n{{history}}How many units (an integer from 0 to {{endowment}}) "
        "do you invest this round?";
    std::string label_x = "X";
    std::string label_y = "Y";

    /// Overrides any template for which `<dir>/<name>.txt` exists.
    static PromptTemplates load(const std::filesystem::path& dir) {
        PromptTemplates t;
        auto read = [&](const char* name, std::string& slot) {
            const auto p = dir / (std::string(name) + ".txt");
            if (!std::filesystem::exists(p)) return;
            std::ifstream in(p);
            std::stringstream ss;
            ss << in.rdbuf();
            slot = ss.str();
            while (!slot.empty() && (slot.back() == '\n' || slot.back() == '\r')) slot.pop_back();
        };
        read("bandit_system", t.bandit_system);
        read("bandit_trial", t.bandit_trial);
        read("trust_system", t.trust_system);
        read("trust_round", t.trust_round);
        return t;
    }
};

/// Replaces every {{key}} in `tmpl`. Each name in `required` must occur.
inline std::string render_template(const std::string& tmpl, const std::map<std::string, std::string>& values,
                                   const std::set<std::string>& required, const std::string& template_name) {
    for (const auto& key : required)
        if (tmpl.find("{{" + key + "}}") == std::string::npos)
            throw ConfigError("template '" + template_name + "' is missing placeholder {{" + key + "}}");
    std::string out;
    out.reserve(tmpl.size() + 256);
    std::size_t pos = 0;
    while (pos < tmpl.size()) {
        const auto open = tmpl.find("{{", pos);
        if (open == std::string::npos) {
            out.append(tmpl, pos);
            break;
        }
        const auto close = tmpl.find("}}", open + 2);
        if (close == std::string::npos) {
            out.append(tmpl, pos);
            break;
        }
        out.append(tmpl, pos, open - pos);
        const std::string key = tmpl.substr(open + 2, close - open - 2);
        const auto it = values.find(key);
        if (it == values.end()) throw ConfigError("template '" + template_name + "' uses unknown placeholder {{" + key + "}}");
        out += it->second;
        pos = close + 2;
    }
    return out;
}

/// Quarter-unit amount as a short decimal: 30 -> "7.5", 72 -> "18".
inline std::string format_units(std::int64_t q) {
    const bool neg = q < 0;
    if (neg) q = -q;
    std::string s = std::to_string(q / 4);
    switch (q % 4) {
        case 1: s += ".25"; break;
        case 2: s += ".5"; break;
        case 3: s += ".75"; break;
        default: break;
    }
    return neg ? "-" + s : s;
}

inline std::string bandit_history_block(const PromptTemplates& tpl, std::span<const TrialRecord> history) {
    if (history.empty()) return "";
    std::string block = "Previous trials:\n";
    for (const auto& r : history) {
        block += "Trial " + std::to_string(r.t) + ": you visited Planet " +
                 (r.action == 0 ? tpl.label_x : tpl.label_y) +
                 (r.reward > 0.0 ? " and found a gold coin.\n" : " and found nothing.\n");
    }
    return block;
}

inline std::string trust_history_block(const TrustConfig& cfg, std::span<const TrialRecord> history) {
    if (history.empty()) return "";
    std::string block = "Summary of previous rounds:\n";
    for (const auto& r : history) {
        const std::int64_t earned_q = 4LL * (cfg.endowment - r.action) + r.repayment_q;
        block += "Round " + std::to_string(r.t) + ": you invested " + std::to_string(r.action) +
                 ", the trustee returned " + format_units(r.repayment_q) + ", your round earnings " +
                 format_units(earned_q) + ".\n";
    }
    return block;
}

/// Messages for the next decision given the episode so far.
inline std::vector<ChatMessage> build_llm_prompt(const TaskSpec& task, const PromptTemplates& tpl,
                                                 std::span<const TrialRecord> history) {
    if (static_cast<int>(history.size()) >= task.horizon())
        throw InvalidInput("build_llm_prompt: episode already complete");
    const std::string next = std::to_string(history.size() + 1);
    if (task.kind == TaskKind::bandit) {
        const std::map<std::string, std::string> v = {
            {"label_x", tpl.label_x},
            {"label_y", tpl.label_y},
            {"trials", std::to_string(task.bandit.trials)},
            {"trial", next},
            {"history", bandit_history_block(tpl, history)}};
        return {{"system", render_template(tpl.bandit_system, v, {}, "bandit_system")},
                {"user", render_template(tpl.bandit_trial, v, {"trial", "history"}, "bandit_trial")}};
    }
    const std::map<std::string, std::string> v = {
        {"rounds", std::to_string(task.trust.rounds)},
        {"endowment", std::to_string(task.trust.endowment)},
        {"multiplier", std::to_string(task.trust.multiplier)},
        {"round", next},
        {"history", trust_history_block(task.trust, history)}};
    return {{"system", render_template(tpl.trust_system, v, {}, "trust_system")},
            {"user", render_template(tpl.trust_round, v, {"round", "history"}, "trust_round")}};
}

inline std::string to_lower(std::string s) {
    for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

/// Extracts a decision from a free-text reply. Bandit: the planet named in
/// the reply (a reply naming both planets, or neither, is rejected). Trust:
/// the first integer, which must lie in 0..endowment.
inline int parse_llm_reply(const TaskSpec& task, const std::string& raw, const PromptTemplates& tpl = {}) {
    if (task.kind == TaskKind::bandit) {
        const std::string text = to_lower(raw);
        const std::string lx = to_lower(tpl.label_x), ly = to_lower(tpl.label_y);
        std::set<int> found;
        const std::regex planet(R"(planet\s+([a-z0-9]+))");
        for (auto it = std::sregex_iterator(text.begin(), text.end(), planet); it != std::sregex_iterator(); ++it) {
            const std::string tok = (*it)[1].str();
            if (tok == lx) found.insert(0);
            if (tok == ly) found.insert(1);
        }
        if (found.empty()) {
            std::string trimmed;
            for (char c : text)
                if (!std::isspace(static_cast<unsigned char>(c)) && c != '.' && c != '"') trimmed += c;
            if (trimmed == lx) found.insert(0);
            if (trimmed == ly) found.insert(1);
        }
        if (found.size() != 1) throw ParseFailure("no unambiguous planet choice in reply", raw);
        return *found.begin();
    }
    std::smatch m;
    if (!std::regex_search(raw, m, std::regex(R"(-?\d+)")))
        throw ParseFailure("no investment amount in reply", raw);
    long v = 0;
    try {
        v = std::stol(m.str());
    } catch (const std::exception&) {
        throw ParseFailure("investment amount not representable", raw);
    }
    if (v < 0 || v > task.trust.endowment)
        throw ParseFailure("investment " + m.str() + " outside 0.." + std::to_string(task.trust.endowment), raw);
    return static_cast<int>(v);
}

/// A reply a cooperative model might give for `action`; parse_llm_reply of it
/// returns `action`.
inline std::string compliant_reply(const TaskSpec& task, int action, const PromptTemplates& tpl = {}) {
    if (task.kind == TaskKind::bandit) return "I will visit Planet " + (action == 0 ? tpl.label_x : tpl.label_y) + ".";
    return "I invest " + std::to_string(action) + " units this round.";
}

}  // namespace advprobe
