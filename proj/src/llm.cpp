#include "unifar/llm.hpp"

#include "unifar/error.hpp"
#include "unifar/io.hpp"

#include "json.hpp"

#include <cmath>
#include <cstdlib>

namespace unifar {

using nlohmann::json;

std::chrono::milliseconds RetryPolicy::delay_before(int attempt) const {
    if (attempt <= 1) return std::chrono::milliseconds(0);
    const double ms = static_cast<double>(base_delay.count()) * std::pow(multiplier, attempt - 2);
    return std::chrono::milliseconds(static_cast<long long>(ms));
}

std::vector<TranscriptEntry> parse_transcript(std::string_view text, const std::string& source) {
    std::vector<TranscriptEntry> out;
    std::size_t pos = 0, line_no = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        const std::string_view line = text.substr(pos, nl - pos);
        pos = nl + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
        try {
            const json j = json::parse(line);
            out.push_back({j.at("system").get<std::string>(), j.at("user").get<std::string>(),
                           j.at("response").get<std::string>()});
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kParseError, source + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

std::string serialize_transcript(const std::vector<TranscriptEntry>& entries) {
    std::string out;
    for (const auto& e : entries) {
        out += json{{"system", e.system}, {"user", e.user}, {"response", e.response}}.dump();
        out += '\n';
    }
    return out;
}

ReplayLlmClient::ReplayLlmClient(const std::vector<TranscriptEntry>& entries) {
    for (const auto& e : entries) queues_[{e.system, e.user}].push_back(e.response);
}

ReplayLlmClient ReplayLlmClient::from_file(const std::filesystem::path& path) {
    return ReplayLlmClient(parse_transcript(io::read_file(path), path.string()));
}

std::string ReplayLlmClient::complete(const std::string& system_message, const std::string& user_prompt) {
    auto it = queues_.find({system_message, user_prompt});
    if (it == queues_.end() || it->second.empty()) {
        std::string head = user_prompt.substr(0, 80);
        for (char& c : head) {
            if (c == '\n') c = ' ';
        }
        throw Error(ErrorKind::kLlmFailure, "no recorded response for prompt \"" + head + "...\"");
    }
    std::string response = std::move(it->second.front());
    it->second.pop_front();
    return response;
}

std::size_t ReplayLlmClient::remaining() const {
    std::size_t n = 0;
    for (const auto& [key, q] : queues_) n += q.size();
    return n;
}

std::string RecordingLlmClient::complete(const std::string& system_message, const std::string& user_prompt) {
    std::string response = inner_.complete(system_message, user_prompt);
    entries_.push_back({system_message, user_prompt, response});
    return response;
}

void RecordingLlmClient::save(const std::filesystem::path& path) const {
    io::write_file_atomic(path, serialize_transcript(entries_));
}

std::optional<HttpLlmOptions> HttpLlmOptions::from_env() {
    const char* key = std::getenv("UNIFAR_LLM_API_KEY");
    if (key == nullptr || *key == '\0') return std::nullopt;
    HttpLlmOptions o;
    o.api_key = key;
    const char* base = std::getenv("UNIFAR_LLM_BASE_URL");
    o.base_url = base != nullptr && *base != '\0' ? base : "https://api.openai.com/v1";
    if (const char* model = std::getenv("UNIFAR_LLM_MODEL"); model != nullptr && *model != '\0') o.model = model;
    return o;
}

}  // namespace unifar
