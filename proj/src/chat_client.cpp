#include "alignforge/chat_client.hpp"

#include <cstdlib>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "alignforge/common.hpp"

namespace alignforge::chat {

using nlohmann::json;

HttpClientConfig http_config_from_env() {
  HttpClientConfig config;
  const char* url = std::getenv("ALIGNFORGE_API_URL");
  const char* key = std::getenv("ALIGNFORGE_API_KEY");
  if (!url || !*url) {
    throw AuthError("ALIGNFORGE_API_URL is not set; point it at a chat-completions endpoint");
  }
  if (!key || !*key) {
    throw AuthError("ALIGNFORGE_API_KEY is not set; export the API key for " + std::string(url));
  }
  config.url = url;
  config.api_key = key;
  return config;
}

HttpChatClient::HttpChatClient(HttpClientConfig config) : config_(std::move(config)) {
  const auto scheme_end = config_.url.find("://");
  if (scheme_end == std::string::npos) {
    throw UsageError("API URL must start with http:// or https://: " + config_.url);
  }
  const auto path_start = config_.url.find('/', scheme_end + 3);
  origin_ = config_.url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : config_.url.substr(path_start);
}

std::string HttpChatClient::complete(const std::string& system, const std::string& user,
                                     const GenerationParams& params) {
  // One connection per call keeps the client safe to share across threads.
  httplib::Client client(origin_);
  const auto seconds = static_cast<time_t>(config_.timeout_seconds);
  client.set_connection_timeout(seconds);
  client.set_read_timeout(seconds);
  client.set_write_timeout(seconds);
  client.set_bearer_token_auth(config_.api_key);

  const json body = {{"model", params.model},
                     {"temperature", params.temperature},
                     {"messages",
                      json::array({{{"role", "system"}, {"content", system}},
                                   {{"role", "user"}, {"content", user}}})}};
  const auto res = client.Post(path_, body.dump(-1, ' ', false, json::error_handler_t::replace),
                               "application/json");
  if (!res) throw TransportError("request to " + config_.url + " failed: " + httplib::to_string(res.error()));
  if (res->status == 401 || res->status == 403) {
    throw AuthError("backend rejected credentials (HTTP " + std::to_string(res->status) + ")");
  }
  if (res->status != 200) throw TransportError("backend returned HTTP " + std::to_string(res->status));
  try {
    const json reply = json::parse(res->body);
    return reply.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const json::exception& e) {
    throw TransportError(std::string("unreadable backend reply: ") + e.what());
  }
}

}  // namespace alignforge::chat
