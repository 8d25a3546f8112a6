#pragma once

// A remote language model playing the subject seat through an
// OpenAI-style chat-completions endpoint.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "advprobe/episode.hpp"
#include "advprobe/prompts.hpp"
#include "advprobe/subjects.hpp"

namespace advprobe {

struct LlmConfig {
    std::string base_url = "http://127.0.0.1:8000";
    std::string path = "/v1/chat/completions";
    std::string model = "gpt-4";
    double temperature = 1.0;
    int timeout_seconds = 60;
    int retry_limit = 3;  // re-prompts after the first attempt
    std::string api_key_env = "OPENAI_API_KEY";
    std::filesystem::path transcript_path;  // appended to when non-empty
};

/// Everything exchanged with the model during one episode.
struct PromptTranscript {
    struct Exchange {
        int trial = 0;
        int attempt = 0;
        std::string user;
        std::string reply;
    };
    std::string system;
    std::vector<Exchange> exchanges;
};

class ChatClient {
public:
    virtual ~ChatClient() = default;
    /// Returns the assistant reply text. Throws SubjectAborted on transport
    /// failure.
    virtual std::string complete(const std::vector<ChatMessage>& messages) = 0;
};

class HttpChatClient final : public ChatClient {
public:
    explicit HttpChatClient(LlmConfig cfg) : cfg_(std::move(cfg)) {}

    std::string complete(const std::vector<ChatMessage>& messages) override {
        nlohmann::json body;
        body["model"] = cfg_.model;
        body["temperature"] = cfg_.temperature;
        body["messages"] = nlohmann::json::array();
        for (const auto& m : messages) body["messages"].push_back({{"role", m.role}, {"content", m.content}});

        httplib::Client client(cfg_.base_url);
        client.set_connection_timeout(cfg_.timeout_seconds);
        client.set_read_timeout(cfg_.timeout_seconds);
        httplib::Headers headers;
        if (const char* key = std::getenv(cfg_.api_key_env.c_str()); key && *key)
            headers.emplace("Authorization", std::string("Bearer ") + key);
        auto res = client.Post(cfg_.path, headers, body.dump(), "application/json");
        if (!res) throw SubjectAborted("chat endpoint unreachable: " + httplib::to_string(res.error()));
        if (res->status != 200)
            throw SubjectAborted("chat endpoint returned HTTP " + std::to_string(res->status));
        try {
            const auto j = nlohmann::json::parse(res->body);
            return j.at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const nlohmann::json::exception& e) {
            throw SubjectAborted(std::string("malformed chat response: ") + e.what());
        }
    }

private:
    LlmConfig cfg_;
};

/// One prompt per decision, history embedded in the prompt. Unparseable
/// replies are re-prompted up to `retry_limit` times before the episode is
/// aborted.
class LlmSubject final : public Subject {
public:
    LlmSubject(TaskSpec task, LlmConfig cfg, PromptTemplates tpl, std::shared_ptr<ChatClient> client)
        : task_(std::move(task)), cfg_(std::move(cfg)), tpl_(std::move(tpl)), client_(std::move(client)) {
        if (!client_) client_ = std::make_shared<HttpChatClient>(cfg_);
    }

    std::string id() const override { return "llm:" + cfg_.model; }
    bool deterministic() const override { return false; }

    void reset() override {
        history_.clear();
        transcript_ = {};
    }

    int act(const Feedback& fb, Rng&) override {
        if (fb.prev_action) {
            TrialRecord r;
            r.t = static_cast<int>(history_.size()) + 1;
            r.action = *fb.prev_action;
            r.reward = fb.prev_reward;
            r.observation = fb.observation;
            if (const auto* o = std::get_if<TrustObservation>(&fb.observation)) {
                r.repay_action = o->repay_action;
                r.repayment_q = o->repayment_q;
            }
            history_.push_back(r);
        }
        const auto messages = build_llm_prompt(task_, tpl_, history_);
        transcript_.system = messages.front().content;
        std::string last_reply;
        for (int attempt = 0; attempt <= cfg_.retry_limit; ++attempt) {
            std::string reply;
            try {
                reply = client_->complete(messages);
            } catch (const SubjectAborted& e) {
                last_reply = e.what();
                record(fb.trial, attempt, messages.back().content, "<error> " + last_reply);
                continue;
            }
            record(fb.trial, attempt, messages.back().content, reply);
            last_reply = reply;
            try {
                return parse_llm_reply(task_, reply, tpl_);
            } catch (const ParseFailure&) {
            }
        }
        throw SubjectAborted("no usable reply on trial " + std::to_string(fb.trial) + " after " +
                             std::to_string(cfg_.retry_limit + 1) + " attempts; last: " + last_reply);
    }

    const PromptTranscript& transcript() const { return transcript_; }

    std::unique_ptr<Subject> clone() const override { return std::make_unique<LlmSubject>(*this); }

private:
    void record(int trial, int attempt, const std::string& user, const std::string& reply) {
        transcript_.exchanges.push_back({trial, attempt, user, reply});
        if (cfg_.transcript_path.empty()) return;
        static std::mutex file_mutex;
        std::lock_guard lock(file_mutex);
        std::ofstream out(cfg_.transcript_path, std::ios::app);
        out << nlohmann::json{{"model", cfg_.model},     {"trial", trial}, {"attempt", attempt},
                              {"system", transcript_.system}, {"user", user},   {"reply", reply}}
                   .dump()
            << '\n';
    }

    TaskSpec task_;
    LlmConfig cfg_;
    PromptTemplates tpl_;
    std::shared_ptr<ChatClient> client_;
    std::vector<TrialRecord> history_;
    PromptTranscript transcript_;
};

}  // namespace advprobe
