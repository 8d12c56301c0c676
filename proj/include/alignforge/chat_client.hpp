#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace alignforge::chat {

/// Credentials rejected by the backend. Never retried.
class AuthError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Connection failure, non-success status or unreadable reply. Retryable.
class TransportError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct GenerationParams {
  std::string model = "gpt-4o-mini";
  double temperature = 0.7;
  std::uint64_t seed = 0;
};

/// Chat-completion backend. Implementations must allow concurrent calls.
class ChatClient {
 public:
  virtual ~ChatClient() = default;
  virtual std::string complete(const std::string& system, const std::string& user,
                               const GenerationParams& params) = 0;
};

struct HttpClientConfig {
  /// Full endpoint URL, e.g. https://host/v1/chat/completions.
  std::string url;
  std::string api_key;
  double timeout_seconds = 60.0;
};

/// Reads ALIGNFORGE_API_URL and ALIGNFORGE_API_KEY. Throws AuthError naming
/// the missing variable.
HttpClientConfig http_config_from_env();

/// OpenAI-style chat-completions client over HTTP(S). Sends model, a system
/// and a user message and temperature; returns choices[0].message.content.
class HttpChatClient : public ChatClient {
 public:
  explicit HttpChatClient(HttpClientConfig config);
  std::string complete(const std::string& system, const std::string& user,
                       const GenerationParams& params) override;

 private:
  HttpClientConfig config_;
  std::string origin_;  // scheme://host[:port]
  std::string path_;
};

}  // namespace alignforge::chat
