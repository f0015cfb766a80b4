#pragma once

#include <optional>
#include <string>
#include <vector>

#include "regrasp/geometry.hpp"
#include "regrasp/image.hpp"

namespace regrasp {

enum class GripperRole { Left, Right };

inline const char* role_name(GripperRole r) { return r == GripperRole::Left ? "left" : "right"; }

/// A numbered proposal shown to the scorer. `arc` is set when the point was
/// drawn on an object contour and absent for free image-plane samples.
struct GraspCandidate {
  int id = 0;
  Vec2 xy;
  std::optional<double> arc;
  friend bool operator==(const GraspCandidate&, const GraspCandidate&) = default;
};

struct GraspDescription {
  std::string left;
  std::string right;
};

struct ScorerQuery {
  GripperRole role = GripperRole::Left;
  int iteration = 1;
  int top_n = 1;
  std::string prompt;
  std::vector<GraspCandidate> candidates;
  std::optional<Vec2> left_marker;
  std::optional<Rgb8> image;  ///< annotated view; only filled for scorers that want pixels
};

struct ScorerVerdict {
  std::vector<int> selected_ids;
  std::string rationale;
  friend bool operator==(const ScorerVerdict&, const ScorerVerdict&) = default;
};

/// Anything that can pick the most promising numbered candidates. Calls for
/// one refinement run are strictly sequential.
class Scorer {
 public:
  virtual ~Scorer() = default;
  virtual ScorerVerdict select(const ScorerQuery& query) = 0;
  /// Textual grasp prior ("Left: ... Right: ...") used as the VQA description.
  virtual GraspDescription describe(const std::string& task_desc, const Rgb8& top_down) = 0;
  virtual bool wants_image() const { return false; }
  virtual std::string mode() const = 0;
};

}  // namespace regrasp
