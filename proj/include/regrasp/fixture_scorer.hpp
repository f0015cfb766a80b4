#pragma once

// Scorer sessions as JSON-lines fixtures: one record per scorer call with the
// prompt hash, image hash and reply text. RecordingScorer writes them,
// FixtureScorer replays them in order.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/error.hpp"
#include "regrasp/hash.hpp"
#include "regrasp/scorer.hpp"
#include "regrasp/vlm_interface.hpp"

namespace regrasp::vlm {

struct FixtureRecord {
  std::string episode;
  std::string kind;  ///< "describe" or "select"
  std::string prompt_sha256;
  std::string image_sha256;  ///< empty when no image was attached
  std::string reply;
  friend bool operator==(const FixtureRecord&, const FixtureRecord&) = default;
};

inline nlohmann::json to_json(const FixtureRecord& r) {
  return {{"episode", r.episode},
          {"kind", r.kind},
          {"prompt_sha256", r.prompt_sha256},
          {"image_sha256", r.image_sha256},
          {"reply", r.reply}};
}

inline FixtureRecord fixture_record_from_json(const nlohmann::json& j) {
  try {
    return {j.value("episode", ""), j.at("kind").get<std::string>(), j.at("prompt_sha256").get<std::string>(),
            j.value("image_sha256", ""), j.at("reply").get<std::string>()};
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::ConfigError, std::string("malformed fixture record: ") + e.what());
  }
}

/// Records grouped by episode key, in call order.
class FixtureLog {
 public:
  void append(FixtureRecord r) { by_episode_[r.episode].push_back(std::move(r)); }
  void append_all(const std::vector<FixtureRecord>& rs) {
    for (const auto& r : rs) append(r);
  }

  const std::vector<FixtureRecord>& episode(const std::string& key) const {
    auto it = by_episode_.find(key);
    if (it == by_episode_.end()) fail(Errc::ScorerFailure, "fixture has no records for episode '" + key + "'");
    return it->second;
  }
  bool contains(const std::string& key) const { return by_episode_.count(key) > 0; }
  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [k, v] : by_episode_) n += v.size();
    return n;
  }

  std::string jsonl() const {
    std::string out;
    for (const auto& [k, v] : by_episode_)
      for (const auto& r : v) out += to_json(r).dump() + "\n";
    return out;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    if (!os) fail(Errc::IoError, "cannot write " + path.string());
    os << jsonl();
  }

  static FixtureLog load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) fail(Errc::ConfigError, "fixture " + path.string() + " does not exist");
    FixtureLog log;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto j = nlohmann::json::parse(line, nullptr, false);
      if (j.is_discarded()) fail(Errc::ConfigError, "fixture line is not JSON: " + line.substr(0, 80));
      log.append(fixture_record_from_json(j));
    }
    return log;
  }

 private:
  std::map<std::string, std::vector<FixtureRecord>> by_episode_;
};

/// Forwards to another scorer and keeps a fixture record of every reply.
class RecordingScorer final : public Scorer {
 public:
  RecordingScorer(Scorer& inner, std::string episode, int max_side = 512)
      : inner_(inner), episode_(std::move(episode)), max_side_(max_side) {}

  ScorerVerdict select(const ScorerQuery& q) override {
    ScorerVerdict v = inner_.select(q);
    records_.push_back({episode_, "select", sha256_hex(q.prompt), q.image ? image_digest(*q.image, max_side_) : "",
                        render_verdict_reply(v)});
    return v;
  }

  GraspDescription describe(const std::string& task_desc, const Rgb8& top_down) override {
    GraspDescription d = inner_.describe(task_desc, top_down);
    std::string prompt = render_grasp_prompt(task_desc);
    records_.push_back({episode_, "describe", sha256_hex(prompt), inner_.wants_image() ? image_digest(top_down, max_side_) : "",
                        render_grasp_description(d)});
    return d;
  }

  bool wants_image() const override { return inner_.wants_image(); }
  std::string mode() const override { return inner_.mode(); }
  const std::vector<FixtureRecord>& records() const { return records_; }

 private:
  Scorer& inner_;
  std::string episode_;
  int max_side_;
  std::vector<FixtureRecord> records_;
};

/// Replays one episode's records in order. A call whose kind, prompt hash or
/// image hash differs from the next record fails with ScorerFailure.
class FixtureScorer final : public Scorer {
 public:
  FixtureScorer(std::vector<FixtureRecord> records, int max_side = 512)
      : records_(std::move(records)), max_side_(max_side) {
    for (const auto& r : records_) wants_image_ = wants_image_ || !r.image_sha256.empty();
  }

  ScorerVerdict select(const ScorerQuery& q) override {
    const auto& r = next("select", q.prompt, q.image ? &*q.image : nullptr);
    return {parse_points_response(r.reply), reply_rationale(r.reply)};
  }

  GraspDescription describe(const std::string& task_desc, const Rgb8& top_down) override {
    const auto& r = next("describe", render_grasp_prompt(task_desc), wants_image_ ? &top_down : nullptr);
    return parse_grasp_description(r.reply);
  }

  bool wants_image() const override { return wants_image_; }
  std::string mode() const override { return "fixture"; }
  std::size_t consumed() const { return cursor_; }
  std::size_t remaining() const { return records_.size() - cursor_; }

 private:
  const FixtureRecord& next(const std::string& kind, const std::string& prompt, const Rgb8* image) {
    if (cursor_ >= records_.size()) fail(Errc::ScorerFailure, "fixture exhausted");
    const auto& r = records_[cursor_];
    if (r.kind != kind) fail(Errc::ScorerFailure, "fixture diverged: expected a '" + r.kind + "' call");
    if (r.prompt_sha256 != sha256_hex(prompt)) fail(Errc::ScorerFailure, "fixture diverged: prompt differs");
    if (!r.image_sha256.empty() && (!image || image_digest(*image, max_side_) != r.image_sha256))
      fail(Errc::ScorerFailure, "fixture diverged: image differs");
    ++cursor_;
    return r;
  }

  std::vector<FixtureRecord> records_;
  int max_side_;
  bool wants_image_ = false;
  std::size_t cursor_ = 0;
};

}  // namespace regrasp::vlm
