// SPDX-License-Identifier: Apache-2.0
#include "memcycle/chat.hpp"

#include "memcycle/error.hpp"

#include <httplib.h>

#include <cstdlib>

namespace memcycle {

ChatReply ChatEndpoint::chat(std::span<const ChatMessage> messages) {
    if (messages.empty()) {
        throw ContractError("chat requires at least one message");
    }
    return do_chat(messages);
}

std::string ChatEndpoint::complete(std::string_view prompt) {
    const ChatMessage message{"user", std::string(prompt)};
    return chat(std::span<const ChatMessage>(&message, 1)).text;
}

ScriptedChatEndpoint::ScriptedChatEndpoint(std::vector<ScriptStep> script, std::string model_ref)
    : script_(std::move(script)), model_ref_(std::move(model_ref)) {}

std::shared_ptr<ScriptedChatEndpoint> ScriptedChatEndpoint::replies(std::vector<std::string> texts,
                                                                    std::string model_ref) {
    std::vector<ScriptStep> script;
    script.reserve(texts.size());
    for (auto& t : texts) {
        script.push_back({std::move(t), false});
    }
    return std::make_shared<ScriptedChatEndpoint>(std::move(script), std::move(model_ref));
}

ChatStats ScriptedChatEndpoint::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

std::vector<std::vector<ChatMessage>> ScriptedChatEndpoint::received() const {
    std::lock_guard lock(mutex_);
    return received_;
}

ChatReply ScriptedChatEndpoint::do_chat(std::span<const ChatMessage> messages) {
    std::lock_guard lock(mutex_);
    if (next_ >= script_.size()) {
        throw ContractError("script exhausted after " + std::to_string(script_.size()) + " replies");
    }
    ++stats_.calls;
    received_.emplace_back(messages.begin(), messages.end());
    const auto& step = script_[next_++];
    if (step.fail) {
        ++stats_.failures;
        throw RetryableError("scripted failure" + (step.text.empty() ? std::string() : ": " + step.text));
    }
    return ChatReply{step.text, std::nullopt};
}

FunctionChatEndpoint::FunctionChatEndpoint(Responder responder, std::string model_ref)
    : responder_(std::move(responder)), model_ref_(std::move(model_ref)) {}

std::shared_ptr<FunctionChatEndpoint> FunctionChatEndpoint::from_prompt(
    std::function<std::string(const std::string& prompt)> f, std::string model_ref) {
    return std::make_shared<FunctionChatEndpoint>(
        [f = std::move(f)](std::span<const ChatMessage> messages, std::size_t) {
            return ChatReply{f(messages.back().content), std::nullopt};
        },
        std::move(model_ref));
}

ChatStats FunctionChatEndpoint::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

ChatReply FunctionChatEndpoint::do_chat(std::span<const ChatMessage> messages) {
    std::size_t index = 0;
    {
        std::lock_guard lock(mutex_);
        index = stats_.calls++;
    }
    try {
        return responder_(messages, index);
    } catch (const RetryableError&) {
        std::lock_guard lock(mutex_);
        ++stats_.failures;
        throw;
    }
}

namespace {

struct SplitUrl {
    std::string base;
    std::string path;
};

SplitUrl split_url(const std::string& url) {
    const auto scheme = url.find("://");
    if (scheme == std::string::npos) {
        throw ContractError("url must include a scheme: " + url);
    }
    const auto slash = url.find('/', scheme + 3);
    if (slash == std::string::npos) {
        return {url, "/"};
    }
    return {url.substr(0, slash), url.substr(slash)};
}

}  // namespace

HttpResponse HttplibTransport::post(const std::string& url, const std::string& body, const HttpHeaders& headers,
                                    std::chrono::milliseconds timeout) {
    const auto parts = split_url(url);
    httplib::Client client(parts.base);
    const auto secs = static_cast<time_t>(timeout.count() / 1000);
    const auto usecs = static_cast<time_t>((timeout.count() % 1000) * 1000);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers h;
    for (const auto& [k, v] : headers) {
        h.emplace(k, v);
    }
    auto res = client.Post(parts.path, h, body, "application/json");
    if (!res) {
        throw RetryableError("transport error posting to " + url + ": " + httplib::to_string(res.error()));
    }
    return HttpResponse{res->status, res->body};
}

HttpHeaders auth_headers(const std::string& env_var) {
    HttpHeaders headers;
    if (env_var.empty()) {
        return headers;
    }
    if (const char* token = std::getenv(env_var.c_str()); token != nullptr && *token != '\0') {
        headers.emplace_back("Authorization", std::string("Bearer ") + token);
    }
    return headers;
}

RemoteChatEndpoint::RemoteChatEndpoint(RemoteEndpointConfig config, std::shared_ptr<HttpTransport> transport)
    : config_(std::move(config)),
      transport_(transport ? std::move(transport) : std::make_shared<HttplibTransport>()) {
    if (config_.url.empty()) {
        throw ContractError("remote endpoint url is empty");
    }
}

ChatStats RemoteChatEndpoint::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

Json RemoteChatEndpoint::request_body(const RemoteEndpointConfig& config, std::span<const ChatMessage> messages) {
    Json msgs = Json::array();
    for (const auto& m : messages) {
        msgs.push_back({{"role", m.role}, {"content", m.content}});
    }
    Json body{{"model", config.model}, {"messages", std::move(msgs)}, {"temperature", config.temperature}};
    if (config.logprobs) {
        body["logprobs"] = true;
    }
    return body;
}

ChatReply RemoteChatEndpoint::parse_response(const std::string& body) {
    Json j;
    try {
        j = Json::parse(body);
    } catch (const Json::parse_error& e) {
        throw Error(std::string("malformed chat response: ") + e.what());
    }
    if (!j.contains("choices") || !j["choices"].is_array() || j["choices"].empty()) {
        throw Error("chat response has no choices");
    }
    const auto& choice = j["choices"][0];
    ChatReply reply;
    reply.text = choice.at("message").at("content").get<std::string>();
    if (choice.contains("logprobs") && choice["logprobs"].is_object() && choice["logprobs"].contains("content")) {
        std::vector<double> lps;
        for (const auto& tok : choice["logprobs"]["content"]) {
            lps.push_back(tok.at("logprob").get<double>());
        }
        reply.token_logprobs = std::move(lps);
    }
    return reply;
}

ChatReply RemoteChatEndpoint::do_chat(std::span<const ChatMessage> messages) {
    const auto body = request_body(config_, messages).dump();
    auto headers = auth_headers(config_.token_env);
    std::size_t retries = 0;
    try {
        auto reply = with_retries(config_.retry, retries, [&] {
            auto res = transport_->post(config_.url, body, headers, config_.timeout);
            if (res.status == 429 || res.status >= 500) {
                throw RetryableError("endpoint returned HTTP " + std::to_string(res.status));
            }
            if (res.status != 200) {
                throw Error("endpoint returned HTTP " + std::to_string(res.status) + ": " + res.body);
            }
            return parse_response(res.body);
        });
        std::lock_guard lock(mutex_);
        ++stats_.calls;
        stats_.retries += retries;
        return reply;
    } catch (...) {
        std::lock_guard lock(mutex_);
        ++stats_.calls;
        ++stats_.failures;
        stats_.retries += retries;
        throw;
    }
}

void EndpointRegistry::add(const std::string& name, std::shared_ptr<ChatEndpoint> endpoint) {
    endpoints_[name] = std::move(endpoint);
}

bool EndpointRegistry::contains(const std::string& name) const { return endpoints_.count(name) != 0; }

ChatEndpoint& EndpointRegistry::get(const std::string& name) const { return *shared(name); }

std::shared_ptr<ChatEndpoint> EndpointRegistry::shared(const std::string& name) const {
    auto it = endpoints_.find(name);
    if (it == endpoints_.end()) {
        throw ConfigError("/endpoints/" + name, "no endpoint named '" + name + "'");
    }
    return it->second;
}

}  // namespace memcycle
