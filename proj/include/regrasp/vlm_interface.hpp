#pragma once

// Prompting protocol for the vision-language scorer: the grasp-guided and
// iterative-VQA templates, numbered-circle annotation, and reply parsing.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "regrasp/error.hpp"
#include "regrasp/hash.hpp"
#include "regrasp/image.hpp"
#include "regrasp/scorer.hpp"

namespace regrasp::vlm {

inline constexpr std::string_view kGraspPromptTemplate =
    "You are a robot equipped with a parallel-jaw gripper, performing the task '{task_desc}'. Analyze the provided "
    "pre-grasp pose of an object and specify precise contact positions for each robot gripper to achieve a stable "
    "grasp. Describe the contact position as much detail as possible using numerical expressions. Avoid using exact "
    "coordinates. Respond in the format: 'Left: [1 sentence starting with ''Position the left gripper'']. Right: [1 "
    "sentence starting with ''Position the right gripper'']'. Let's think step by step.";

// The image itself travels as a separate attachment after the text part.
inline constexpr std::string_view kVqaPromptTemplate =
    "INSTRUCTIONS: You are tasked to locate an object, region, or point in space in the given annotated image "
    "according to a description. The image is annotated with numbered circles.\n"
    "Choose the top {top_n} circles that have the most overlap with and/or is closest to what the description is "
    "describing in the image. You are a five-time world champion in this game. Give a one sentence analysis of why "
    "you chose those points. Provide your answer at the end in a valid JSON of this format: {\"points\": []}.\n"
    "DESCRIPTION: {description}\n"
    "IMAGE:";

inline constexpr std::string_view kLeftMarkerNote =
    "Be aware that the red circle indicates the left gripper's contact position.";

/// Text with `{name}` placeholders. Substitution is single-pass, so bound
/// values are never re-scanned for placeholders.
class PromptTemplate {
 public:
  explicit PromptTemplate(std::string text) : text_(std::move(text)) {}

  std::vector<std::string> placeholders() const {
    std::vector<std::string> out;
    scan([&](std::size_t, std::size_t, std::string_view name) { out.emplace_back(name); });
    return out;
  }

  std::string render(const std::map<std::string, std::string, std::less<>>& bindings) const {
    std::string out;
    std::size_t pos = 0;
    scan([&](std::size_t begin, std::size_t end, std::string_view name) {
      auto it = bindings.find(name);
      if (it == bindings.end()) fail(Errc::UnboundPlaceholder, "no binding for {" + std::string(name) + "}");
      out.append(text_, pos, begin - pos);
      out += it->second;
      pos = end;
    });
    out.append(text_, pos, std::string::npos);
    return out;
  }

  const std::string& text() const { return text_; }

 private:
  template <typename F>
  void scan(F&& f) const {
    std::size_t i = 0;
    while ((i = text_.find('{', i)) != std::string::npos) {
      std::size_t j = i + 1;
      if (j < text_.size() && (std::isalpha(static_cast<unsigned char>(text_[j])) || text_[j] == '_')) {
        while (j < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[j])) || text_[j] == '_')) ++j;
        if (j < text_.size() && text_[j] == '}') {
          f(i, j + 1, std::string_view(text_).substr(i + 1, j - i - 1));
          i = j + 1;
          continue;
        }
      }
      ++i;
    }
  }

  std::string text_;
};

inline std::string render_grasp_prompt(const std::string& task_desc) {
  if (task_desc.empty()) fail(Errc::EmptyTaskDesc, "task description is empty");
  return PromptTemplate(std::string(kGraspPromptTemplate)).render({{"task_desc", task_desc}});
}

inline std::string render_vqa_prompt(const std::string& description, int top_n) {
  require(top_n >= 1, Errc::InvalidArgument, "top_n must be at least 1");
  if (description.empty()) fail(Errc::UnboundPlaceholder, "description is empty");
  return PromptTemplate(std::string(kVqaPromptTemplate))
      .render({{"description", description}, {"top_n", std::to_string(top_n)}});
}

/// Description for the right-jaw query once the left contact is marked.
inline std::string with_left_marker_note(const std::string& description) {
  return description + " " + std::string(kLeftMarkerNote);
}

// ---- annotation ----

struct AnnotationStyle {
  int radius = 7;
  int thickness = 2;
  int font_px = 5;  ///< digit height; glyphs are a 3x5 bitmap scaled by font_px / 5
  Color default_color{255, 255, 255};
  Color promoted_color{255, 0, 0};
  Color left_marker_color{255, 0, 0};

  void validate() const {
    require(radius >= 3, Errc::InvalidArgument, "annotation radius must be >= 3 px");
    require(thickness >= 1 && font_px >= 5, Errc::InvalidArgument, "annotation stroke/font too small");
    require(default_color != promoted_color && default_color != left_marker_color, Errc::InvalidArgument,
            "annotation colours must be distinct");
  }
};

namespace detail {

// 3x5 digit glyphs, one row per nibble (bit 2 = leftmost column).
inline constexpr std::array<std::array<std::uint8_t, 5>, 10> kDigits = {{
    {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
    {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7},
}};

inline void draw_label(Rgb8& img, Vec2 center, int label, int scale, Color color) {
  std::string digits = std::to_string(label);
  const int gw = 3 * scale, gh = 5 * scale, gap = scale;
  const int total_w = int(digits.size()) * gw + (int(digits.size()) - 1) * gap;
  int x0 = int(std::floor(center.x - total_w / 2.0));
  int y0 = int(std::floor(center.y - gh / 2.0));
  for (std::size_t k = 0; k < digits.size(); ++k) {
    const auto& g = kDigits[std::size_t(digits[k] - '0')];
    int gx = x0 + int(k) * (gw + gap);
    for (int r = 0; r < 5; ++r)
      for (int c = 0; c < 3; ++c)
        if (g[std::size_t(r)] & (4 >> c))
          for (int dy = 0; dy < scale; ++dy)
            for (int dx = 0; dx < scale; ++dx) set_pixel(img, gx + c * scale + dx, y0 + r * scale + dy, color);
  }
}

inline void draw_ring(Rgb8& img, Vec2 c, double radius, double thickness, Color color, bool filled) {
  const double outer = radius + 0.5 * thickness + 0.2;
  const double inner = radius - 0.5 * thickness - 0.2;
  int x0 = int(std::floor(c.x - outer)), x1 = int(std::ceil(c.x + outer));
  int y0 = int(std::floor(c.y - outer)), y1 = int(std::ceil(c.y + outer));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      double d = distance({x + 0.5, y + 0.5}, c);
      if (d <= outer && (filled || d >= inner)) set_pixel(img, x, y, color);
    }
}

}  // namespace detail

/// Half-width of the square that bounds everything drawn for one candidate.
inline int glyph_half_extent(const AnnotationStyle& s) {
  return int(std::ceil(s.radius + 0.5 * s.thickness + 0.2)) + 1;
}

/// Draws numbered circles (promoted ids in the promoted colour) and an
/// optional filled left-jaw marker onto a copy of `image`.
inline Rgb8 annotate(const Rgb8& image, std::span<const GraspCandidate> candidates, std::span<const int> promoted,
                     std::optional<Vec2> left_marker, const AnnotationStyle& style = {}) {
  style.validate();
  auto inside = [&](Vec2 p) { return p.x >= 0 && p.y >= 0 && p.x < image.width && p.y < image.height; };
  for (const auto& c : candidates)
    if (!inside(c.xy)) fail(Errc::OutOfBounds, "candidate " + std::to_string(c.id) + " lies outside the image");
  if (left_marker && !inside(*left_marker)) fail(Errc::OutOfBounds, "left marker lies outside the image");

  Rgb8 out = image;
  const int scale = std::max(1, style.font_px / 5);
  if (left_marker) detail::draw_ring(out, *left_marker, style.radius, style.thickness, style.left_marker_color, true);
  for (const auto& c : candidates) {
    bool is_promoted = std::find(promoted.begin(), promoted.end(), c.id) != promoted.end();
    Color col = is_promoted ? style.promoted_color : style.default_color;
    detail::draw_ring(out, c.xy, style.radius, style.thickness, col, false);
    detail::draw_label(out, c.xy, c.id, scale, col);
  }
  return out;
}

// ---- reply parsing ----

namespace detail {

// Index of the brace closing the object opened at `open`, honouring strings.
inline std::optional<std::size_t> matching_brace(std::string_view s, std::size_t open) {
  int depth = 0;
  bool in_str = false, esc = false;
  for (std::size_t i = open; i < s.size(); ++i) {
    char ch = s[i];
    if (in_str) {
      if (esc) esc = false;
      else if (ch == '\\') esc = true;
      else if (ch == '"') in_str = false;
      continue;
    }
    if (ch == '"') in_str = true;
    else if (ch == '{') ++depth;
    else if (ch == '}' && --depth == 0) return i;
  }
  return std::nullopt;
}

}  // namespace detail

/// Ids from the last well-formed JSON object in `text` that has a "points" key.
inline std::vector<int> parse_points_response(std::string_view text) {
  std::optional<nlohmann::json> found;
  for (std::size_t i = text.size(); i-- > 0;) {
    if (text[i] != '{') continue;
    auto close = detail::matching_brace(text, i);
    if (!close) continue;
    auto j = nlohmann::json::parse(text.substr(i, *close - i + 1), nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("points")) continue;
    found = std::move(j);
    break;
  }
  if (!found) fail(Errc::NoParse, "no JSON object with a \"points\" array");
  const auto& pts = (*found)["points"];
  if (!pts.is_array()) fail(Errc::InvalidIds, "\"points\" is not an array");
  if (pts.empty()) fail(Errc::EmptySelection, "\"points\" is empty");
  std::vector<int> ids;
  std::set<long long> seen;
  for (const auto& v : pts) {
    if (!v.is_number_integer()) fail(Errc::InvalidIds, "non-integer id " + v.dump());
    long long id = v.get<long long>();
    if (id < 1 || id > 1'000'000) fail(Errc::InvalidIds, "id out of range " + v.dump());
    if (!seen.insert(id).second) fail(Errc::InvalidIds, "duplicated id " + v.dump());
    ids.push_back(int(id));
  }
  return ids;
}

/// Canonical reply text for a verdict; parse_points_response inverts it.
inline std::string render_verdict_reply(const ScorerVerdict& v) {
  nlohmann::json j = {{"points", v.selected_ids}};
  std::string rationale = v.rationale.empty() ? "Selected the closest candidates." : v.rationale;
  return rationale + " " + j.dump();
}

/// Splits a "Left: ... Right: ..." reply into the two jaw descriptions.
inline GraspDescription parse_grasp_description(std::string_view reply) {
  auto l = reply.rfind("Left:");
  if (l == std::string_view::npos) fail(Errc::NoParse, "reply has no 'Left:' section");
  auto r = reply.find("Right:", l);
  if (r == std::string_view::npos) fail(Errc::NoParse, "reply has no 'Right:' section after 'Left:'");
  auto trim = [](std::string_view s) {
    while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.front())) || s.front() == '\'')) s.remove_prefix(1);
    while (!s.empty() && (std::isspace(static_cast<unsigned char>(s.back())) || s.back() == '\'')) s.remove_suffix(1);
    return std::string(s);
  };
  std::string_view right = reply.substr(r + 6);
  if (auto nl = right.find('\n'); nl != std::string_view::npos) right = right.substr(0, nl);
  GraspDescription d{trim(reply.substr(l + 5, r - l - 5)), trim(right)};
  if (d.left.empty() || d.right.empty()) fail(Errc::NoParse, "empty jaw description");
  return d;
}

inline std::string render_grasp_description(const GraspDescription& d) {
  return "Left: " + d.left + " Right: " + d.right;
}

/// Prose before the last JSON object of a reply, trimmed.
inline std::string reply_rationale(std::string_view reply) {
  auto brace = reply.rfind('{');
  std::string_view head = reply.substr(0, brace == std::string_view::npos ? reply.size() : brace);
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.back()))) head.remove_suffix(1);
  while (!head.empty() && std::isspace(static_cast<unsigned char>(head.front()))) head.remove_prefix(1);
  return std::string(head);
}

// ---- endpoint ----

/// Chat-completions endpoint. The token is read from the environment
/// variable named by `token_env` at request time.
struct EndpointConfig {
  std::string base_url = "https://api.openai.com";
  std::string path = "/v1/chat/completions";
  std::string model = "gpt-4o";
  std::string token_env = "OPENAI_API_KEY";
  double timeout_s = 60.0;
  int max_retries = 2;
  int max_side = 512;  ///< longest image side sent to the endpoint

  void validate() const {
    require(timeout_s > 0, Errc::ConfigError, "endpoint timeout must be positive");
    require(max_retries >= 0, Errc::ConfigError, "endpoint retries must be non-negative");
    require(max_side >= 16, Errc::ConfigError, "endpoint image side must be at least 16 px");
    require(!base_url.empty() && !token_env.empty(), Errc::ConfigError, "endpoint url and token variable are required");
  }
};

inline nlohmann::json to_json(const EndpointConfig& c) {
  return {{"base_url", c.base_url}, {"path", c.path},           {"model", c.model},
          {"token_env", c.token_env}, {"timeout_s", c.timeout_s}, {"max_retries", c.max_retries},
          {"max_side", c.max_side}};
}

inline EndpointConfig endpoint_config_from_json(const nlohmann::json& j) {
  EndpointConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.path = j.value("path", c.path);
  c.model = j.value("model", c.model);
  c.token_env = j.value("token_env", c.token_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.max_side = j.value("max_side", c.max_side);
  c.validate();
  return c;
}

/// Hash of the image exactly as it would be sent: downscaled, PNG-encoded.
inline std::string image_digest(const Rgb8& img, int max_side) { return sha256_hex(encode_png(fit_within(img, max_side))); }

}  // namespace regrasp::vlm
