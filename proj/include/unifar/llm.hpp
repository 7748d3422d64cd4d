#pragma once

#include <chrono>
#include <cstddef>
#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace unifar {

struct RetryPolicy {
    int max_attempts = 3;
    std::chrono::milliseconds base_delay{500};
    double multiplier = 2.0;
    // Minimum spacing between requests issued by one client.
    std::chrono::milliseconds min_interval{0};

    // Delay before attempt `attempt` (1-based; attempt 1 has none).
    std::chrono::milliseconds delay_before(int attempt) const;
    static RetryPolicy immediate() { return RetryPolicy{3, std::chrono::milliseconds(0), 2.0, {}}; }
};

class LlmClient {
public:
    virtual ~LlmClient() = default;
    // Throws LlmFailure when no response can be obtained.
    virtual std::string complete(const std::string& system_message, const std::string& user_prompt) = 0;
};

struct TranscriptEntry {
    std::string system;
    std::string user;
    std::string response;
    bool operator==(const TranscriptEntry&) const = default;
};

std::vector<TranscriptEntry> parse_transcript(std::string_view text, const std::string& source = "<transcript>");
std::string serialize_transcript(const std::vector<TranscriptEntry>& entries);

// Answers each (system, user) pair from recorded responses, in recording order
// for repeated prompts. Unrecorded prompts raise LlmFailure.
class ReplayLlmClient : public LlmClient {
public:
    explicit ReplayLlmClient(const std::vector<TranscriptEntry>& entries);
    static ReplayLlmClient from_file(const std::filesystem::path& path);

    std::string complete(const std::string& system_message, const std::string& user_prompt) override;
    std::size_t remaining() const;

private:
    std::map<std::pair<std::string, std::string>, std::deque<std::string>> queues_;
};

// Forwards to another client and keeps every exchange for later replay.
class RecordingLlmClient : public LlmClient {
public:
    explicit RecordingLlmClient(LlmClient& inner) : inner_(inner) {}

    std::string complete(const std::string& system_message, const std::string& user_prompt) override;
    const std::vector<TranscriptEntry>& entries() const { return entries_; }
    void save(const std::filesystem::path& path) const;

private:
    LlmClient& inner_;
    std::vector<TranscriptEntry> entries_;
};

// OpenAI-compatible `/chat/completions` endpoint.
struct HttpLlmOptions {
    std::string base_url;  // e.g. https://api.openai.com/v1
    std::string api_key;
    std::string model = "gpt-4o-mini";
    double temperature = 0.0;
    int timeout_seconds = 60;
    RetryPolicy retry;

    // UNIFAR_LLM_API_KEY (required), UNIFAR_LLM_BASE_URL, UNIFAR_LLM_MODEL.
    static std::optional<HttpLlmOptions> from_env();
};

class HttpLlmClient : public LlmClient {
public:
    explicit HttpLlmClient(HttpLlmOptions options);
    ~HttpLlmClient() override;

    std::string complete(const std::string& system_message, const std::string& user_prompt) override;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace unifar
