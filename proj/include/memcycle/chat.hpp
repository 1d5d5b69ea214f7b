// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "memcycle/error.hpp"
#include "memcycle/linalg.hpp"

#include <chrono>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace memcycle {

struct ChatMessage {
    std::string role;
    std::string content;
};

struct ChatReply {
    std::string text;
    /// Per-token log-probabilities of `text`, when the backend reports them.
    std::optional<std::vector<double>> token_logprobs;
};

struct ChatStats {
    std::size_t calls = 0;
    std::size_t retries = 0;
    std::size_t failures = 0;
};

/// A chat-completions style model endpoint.
class ChatEndpoint {
public:
    virtual ~ChatEndpoint() = default;

    /// Throws ContractError on empty input, RetryableError on transient failure.
    ChatReply chat(std::span<const ChatMessage> messages);
    /// Single user-turn convenience wrapper.
    std::string complete(std::string_view prompt);

    virtual std::string model_ref() const = 0;
    virtual ChatStats stats() const = 0;

protected:
    virtual ChatReply do_chat(std::span<const ChatMessage> messages) = 0;
};

/// One entry of a reply script. `fail` makes the call raise RetryableError.
struct ScriptStep {
    std::string text;
    bool fail = false;
};

/// Replays a fixed script, one entry per call. Calls are serialized so the
/// script order survives concurrent callers; running past the end is a
/// ContractError.
class ScriptedChatEndpoint final : public ChatEndpoint {
public:
    explicit ScriptedChatEndpoint(std::vector<ScriptStep> script, std::string model_ref = "scripted");
    static std::shared_ptr<ScriptedChatEndpoint> replies(std::vector<std::string> texts,
                                                         std::string model_ref = "scripted");

    std::string model_ref() const override { return model_ref_; }
    ChatStats stats() const override;
    /// Every message list received so far.
    std::vector<std::vector<ChatMessage>> received() const;

protected:
    ChatReply do_chat(std::span<const ChatMessage> messages) override;

private:
    mutable std::mutex mutex_;
    std::vector<ScriptStep> script_;
    std::string model_ref_;
    std::size_t next_ = 0;
    ChatStats stats_;
    std::vector<std::vector<ChatMessage>> received_;
};

/// Rule-based endpoint: the reply is a pure function of the messages and the
/// call index.
class FunctionChatEndpoint final : public ChatEndpoint {
public:
    using Responder = std::function<ChatReply(std::span<const ChatMessage>, std::size_t call_index)>;

    FunctionChatEndpoint(Responder responder, std::string model_ref);
    static std::shared_ptr<FunctionChatEndpoint> from_prompt(
        std::function<std::string(const std::string& prompt)> f, std::string model_ref);

    std::string model_ref() const override { return model_ref_; }
    ChatStats stats() const override;

protected:
    ChatReply do_chat(std::span<const ChatMessage> messages) override;

private:
    mutable std::mutex mutex_;
    Responder responder_;
    std::string model_ref_;
    ChatStats stats_;
};

struct HttpResponse {
    int status = 0;
    std::string body;
};

using HttpHeaders = std::vector<std::pair<std::string, std::string>>;

/// Minimal POST transport so remote clients can be exercised without a network.
class HttpTransport {
public:
    virtual ~HttpTransport() = default;
    /// Throws RetryableError when no response was received.
    virtual HttpResponse post(const std::string& url, const std::string& body, const HttpHeaders& headers,
                              std::chrono::milliseconds timeout) = 0;
};

/// cpp-httplib backed transport (plain http).
class HttplibTransport final : public HttpTransport {
public:
    HttpResponse post(const std::string& url, const std::string& body, const HttpHeaders& headers,
                      std::chrono::milliseconds timeout) override;
};

struct RetryPolicy {
    int max_retries = 2;
    std::chrono::milliseconds backoff{0};
};

struct RemoteEndpointConfig {
    /// Full endpoint URL, e.g. http://localhost:8000/v1/chat/completions
    std::string url;
    std::string model;
    /// Environment variable holding the bearer token; empty for none.
    std::string token_env;
    std::chrono::milliseconds timeout{60000};
    RetryPolicy retry;
    bool logprobs = false;
    double temperature = 0.0;
};

/// Runs `attempt` under the retry policy; RetryableError triggers another try.
/// `retries` receives the number of retries performed.
template <typename F>
auto with_retries(const RetryPolicy& policy, std::size_t& retries, F&& attempt) -> decltype(attempt());

class RemoteChatEndpoint final : public ChatEndpoint {
public:
    RemoteChatEndpoint(RemoteEndpointConfig config, std::shared_ptr<HttpTransport> transport = nullptr);

    std::string model_ref() const override { return config_.model; }
    ChatStats stats() const override;

    static Json request_body(const RemoteEndpointConfig& config, std::span<const ChatMessage> messages);
    static ChatReply parse_response(const std::string& body);

protected:
    ChatReply do_chat(std::span<const ChatMessage> messages) override;

private:
    RemoteEndpointConfig config_;
    std::shared_ptr<HttpTransport> transport_;
    mutable std::mutex mutex_;
    ChatStats stats_;
};

/// Bearer-token header list for a token stored in `env_var`.
HttpHeaders auth_headers(const std::string& env_var);

/// Named endpoints, also used to resolve a utilization model_ref.
class EndpointRegistry {
public:
    void add(const std::string& name, std::shared_ptr<ChatEndpoint> endpoint);
    bool contains(const std::string& name) const;
    ChatEndpoint& get(const std::string& name) const;
    std::shared_ptr<ChatEndpoint> shared(const std::string& name) const;

private:
    std::map<std::string, std::shared_ptr<ChatEndpoint>> endpoints_;
};

template <typename F>
auto with_retries(const RetryPolicy& policy, std::size_t& retries, F&& attempt) -> decltype(attempt()) {
    for (int tries = 0;; ++tries) {
        try {
            return attempt();
        } catch (const RetryableError&) {
            if (tries >= policy.max_retries) {
                throw;
            }
            ++retries;
            if (policy.backoff.count() > 0) {
                std::this_thread::sleep_for(policy.backoff * (tries + 1));
            }
        }
    }
}

}  // namespace memcycle
