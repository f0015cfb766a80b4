#pragma once

// Live chat-completions scorer. Each call posts one text part and one base64
// PNG part and parses the reply with the same grammar as fixtures.

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "regrasp/error.hpp"
#include "regrasp/fixture_scorer.hpp"
#include "regrasp/hash.hpp"
#include "regrasp/image.hpp"
#include "regrasp/scorer.hpp"
#include "regrasp/vlm_interface.hpp"

namespace regrasp::vlm {

inline nlohmann::json chat_request_body(const EndpointConfig& cfg, const std::string& prompt,
                                        const std::vector<std::uint8_t>& png) {
  nlohmann::json text = {{"type", "text"}, {"text", prompt}};
  nlohmann::json image = {{"type", "image_url"},
                          {"image_url", {{"url", "data:image/png;base64," + base64_encode(png)}}}};
  return {{"model", cfg.model},
          {"temperature", 0},
          {"messages", nlohmann::json::array({{{"role", "user"}, {"content", nlohmann::json::array({text, image})}}})}};
}

/// Text of the first choice; NoParse when the body does not have one.
inline std::string chat_reply_text(const std::string& body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded()) fail(Errc::NoParse, "endpoint body is not JSON");
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception&) {
    fail(Errc::NoParse, "endpoint body has no choices[0].message.content");
  }
}

class RemoteScorer final : public Scorer {
 public:
  explicit RemoteScorer(EndpointConfig cfg, std::string episode = "") : cfg_(std::move(cfg)), episode_(std::move(episode)) {
    cfg_.validate();
  }

  ScorerVerdict select(const ScorerQuery& q) override {
    if (!q.image) fail(Errc::InvalidArgument, "remote scorer needs the annotated image");
    std::string reply = exchange("select", q.prompt, *q.image);
    return {parse_points_response(reply), reply_rationale(reply)};
  }

  GraspDescription describe(const std::string& task_desc, const Rgb8& top_down) override {
    return parse_grasp_description(exchange("describe", render_grasp_prompt(task_desc), top_down));
  }

  bool wants_image() const override { return true; }
  std::string mode() const override { return "remote"; }
  const std::vector<FixtureRecord>& records() const { return records_; }
  int transport_retries() const { return transport_retries_; }

 private:
  std::string exchange(const std::string& kind, const std::string& prompt, const Rgb8& image) {
    const char* token = std::getenv(cfg_.token_env.c_str());
    if (!token || !*token) fail(Errc::AuthError, "environment variable " + cfg_.token_env + " is not set");
    auto png = encode_png(fit_within(image, cfg_.max_side));
    const std::string body = chat_request_body(cfg_, prompt, png).dump();

    httplib::Client cli(cfg_.base_url);
    const auto sec = time_t(cfg_.timeout_s);
    const auto usec = time_t((cfg_.timeout_s - double(sec)) * 1e6);
    cli.set_connection_timeout(sec, usec);
    cli.set_read_timeout(sec, usec);
    cli.set_write_timeout(sec, usec);
    cli.set_bearer_token_auth(token);

    std::string last;
    bool timed_out = false;
    for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
      if (attempt > 0) ++transport_retries_;
      auto res = cli.Post(cfg_.path, body, "application/json");
      if (!res) {
        timed_out = res.error() == httplib::Error::Read || res.error() == httplib::Error::ConnectionTimeout;
        last = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 401 || res->status == 403)
        fail(Errc::AuthError, "endpoint rejected the token (HTTP " + std::to_string(res->status) + ")");
      if (res->status == 429 || res->status >= 500) {
        timed_out = false;
        last = "HTTP " + std::to_string(res->status);
        continue;
      }
      if (res->status != 200) fail(Errc::ScorerFailure, "endpoint returned HTTP " + std::to_string(res->status));
      std::string reply = chat_reply_text(res->body);
      records_.push_back({episode_, kind, sha256_hex(prompt), sha256_hex(png), reply});
      return reply;
    }
    fail(timed_out ? Errc::Timeout : Errc::ScorerFailure,
         "no reply after " + std::to_string(cfg_.max_retries + 1) + " attempts: " + last);
  }

  EndpointConfig cfg_;
  std::string episode_;
  std::vector<FixtureRecord> records_;
  int transport_retries_ = 0;
};

}  // namespace regrasp::vlm
