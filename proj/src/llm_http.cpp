#include "httplib.h"

#include "unifar/error.hpp"
#include "unifar/llm.hpp"

#include "json.hpp"

#include <thread>

namespace unifar {

using nlohmann::json;

struct HttpLlmClient::Impl {
    HttpLlmOptions options;
    std::string origin;  // scheme://host[:port]
    std::string prefix;  // path before /chat/completions
    std::chrono::steady_clock::time_point last_request{};
};

HttpLlmClient::HttpLlmClient(HttpLlmOptions options) : impl_(std::make_unique<Impl>()) {
    impl_->options = std::move(options);
    const std::string& url = impl_->options.base_url;
    const std::size_t scheme = url.find("://");
    if (scheme == std::string::npos) throw Error(ErrorKind::kConfigError, "LLM base URL lacks a scheme: " + url);
    const std::size_t slash = url.find('/', scheme + 3);
    impl_->origin = url.substr(0, slash);
    impl_->prefix = slash == std::string::npos ? "" : url.substr(slash);
    while (!impl_->prefix.empty() && impl_->prefix.back() == '/') impl_->prefix.pop_back();
}

HttpLlmClient::~HttpLlmClient() = default;

std::string HttpLlmClient::complete(const std::string& system_message, const std::string& user_prompt) {
    const HttpLlmOptions& o = impl_->options;
    httplib::Client client(impl_->origin);
    client.set_connection_timeout(o.timeout_seconds);
    client.set_read_timeout(o.timeout_seconds);
    const httplib::Headers headers{{"Authorization", "Bearer " + o.api_key}};
    const std::string body = json{{"model", o.model},
                                  {"temperature", o.temperature},
                                  {"messages",
                                   {{{"role", "system"}, {"content", system_message}},
                                    {{"role", "user"}, {"content", user_prompt}}}}}
                                 .dump();
    std::string last_error;
    for (int attempt = 1; attempt <= o.retry.max_attempts; ++attempt) {
        std::this_thread::sleep_for(o.retry.delay_before(attempt));
        const auto next_allowed = impl_->last_request + o.retry.min_interval;
        if (std::chrono::steady_clock::now() < next_allowed) std::this_thread::sleep_until(next_allowed);
        impl_->last_request = std::chrono::steady_clock::now();

        auto res = client.Post(impl_->prefix + "/chat/completions", headers, body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status == 429 || res->status >= 500) {
            last_error = "HTTP " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200) {
            throw Error(ErrorKind::kLlmFailure, "HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
        }
        try {
            return json::parse(res->body).at("choices").at(0).at("message").at("content").get<std::string>();
        } catch (const json::exception& e) {
            throw Error(ErrorKind::kLlmFailure, std::string("malformed completion body: ") + e.what());
        }
    }
    throw Error(ErrorKind::kLlmFailure,
                "giving up after " + std::to_string(o.retry.max_attempts) + " attempts: " + last_error);
}

}  // namespace unifar
