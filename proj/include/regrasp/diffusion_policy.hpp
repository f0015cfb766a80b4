#pragma once

// Goal-conditioned DDPM over the 7-d (position, quaternion) part of a grasp
// keypose: forward noising, the weighted noise-prediction loss, Adam
// training, reverse sampling, gradient checking and checkpoints.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regrasp/action.hpp"
#include "regrasp/error.hpp"
#include "regrasp/image.hpp"
#include "regrasp/policy_network.hpp"

namespace regrasp::policy {

using Vec7 = std::array<double, kActionDims>;

// ---------------------------------------------------------------- schedule

struct DiffusionSchedule {
  int steps = 0;
  std::vector<double> beta, alpha, alpha_bar;  ///< index s - 1 for step s

  /// Default endpoints are the usual 1000-step values (1e-4, 0.02) rescaled by 1000 / 50.
  static DiffusionSchedule linear(int steps = 50, double beta_start = 2e-3, double beta_end = 0.4) {
    require(steps >= 1, Errc::InvalidArgument, "schedule needs at least one step");
    DiffusionSchedule d;
    d.steps = steps;
    double prod = 1.0;
    for (int s = 0; s < steps; ++s) {
      double b = steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * s / (steps - 1);
      d.beta.push_back(b);
      d.alpha.push_back(1.0 - b);
      prod *= 1.0 - b;
      d.alpha_bar.push_back(prod);
    }
    d.validate();
    return d;
  }

  void validate() const {
    require(int(beta.size()) == steps && steps >= 1, Errc::InvalidArgument, "schedule length mismatch");
    for (int s = 0; s < steps; ++s) {
      require(beta[std::size_t(s)] > 0.0 && beta[std::size_t(s)] < 1.0, Errc::InvalidArgument, "beta outside (0, 1)");
      if (s > 0) {
        require(beta[std::size_t(s)] >= beta[std::size_t(s) - 1], Errc::InvalidArgument, "beta must be non-decreasing");
        require(alpha_bar[std::size_t(s)] < alpha_bar[std::size_t(s) - 1], Errc::InvalidArgument,
                "alpha_bar must decrease");
      }
    }
  }

  void check_step(int s) const {
    if (s < 1 || s > steps) fail(Errc::StepOutOfRange, "diffusion step " + std::to_string(s) + " outside 1.." + std::to_string(steps));
  }
  double beta_at(int s) const { check_step(s); return beta[std::size_t(s) - 1]; }
  double alpha_at(int s) const { check_step(s); return alpha[std::size_t(s) - 1]; }
  double alpha_bar_at(int s) const { check_step(s); return alpha_bar[std::size_t(s) - 1]; }
  /// Variance of q(x_{s-1} | x_s, x_0).
  double posterior_variance(int s) const {
    double prev = s > 1 ? alpha_bar_at(s - 1) : 1.0;
    return beta_at(s) * (1.0 - prev) / (1.0 - alpha_bar_at(s));
  }
  /// Residual spread left by the last denoising step.
  double residual_sigma() const { return std::sqrt(1.0 - alpha_bar_at(1)); }
};

inline Vec7 q_sample(const Vec7& x0, int s, const Vec7& eps, const DiffusionSchedule& sched) {
  const double ab = sched.alpha_bar_at(s);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Vec7 x;
  for (int i = 0; i < kActionDims; ++i) x[std::size_t(i)] = a * x0[std::size_t(i)] + b * eps[std::size_t(i)];
  return x;
}

/// q-sample of the raw (p, r) vector of an action. The gripper bit is not diffused.
inline Vec7 forward_diffuse(const Action8& a, int s, const Vec7& eps, const DiffusionSchedule& sched) {
  Vec7 x0{a.p[0], a.p[1], a.p[2], a.r[0], a.r[1], a.r[2], a.r[3]};
  return q_sample(x0, s, eps, sched);
}

// ---------------------------------------------------------------- codec

/// Maps actions to the diffused vector: position as an offset from the current
/// action in units of `position_scale`, rotation as the raw quaternion.
struct ActionCodec {
  double position_scale = 0.02;
  double condition_scale = 0.05;

  Vec7 encode(const Action8& target, const Action8& current) const {
    return {(target.p[0] - current.p[0]) / position_scale, (target.p[1] - current.p[1]) / position_scale,
            (target.p[2] - current.p[2]) / position_scale, target.r[0], target.r[1], target.r[2], target.r[3]};
  }
  /// Renormalizes the quaternion, canonicalizes its sign and copies the gripper bit.
  Action8 decode(const Vec7& x, const Action8& current) const {
    Action8 a;
    for (int i = 0; i < 3; ++i) a.p[std::size_t(i)] = current.p[std::size_t(i)] + position_scale * x[std::size_t(i)];
    a.r = canonical_quat({x[3], x[4], x[5], x[6]});
    a.s = current.s;
    return a;
  }
  template <typename S>
  void condition(const Action8& current, S* out) const {
    for (int i = 0; i < 3; ++i) out[i] = S(current.p[std::size_t(i)] / condition_scale);
    for (int i = 0; i < 4; ++i) out[3 + i] = S(current.r[std::size_t(i)]);
  }
};

// ---------------------------------------------------------------- augmentation

struct Augmentation {
  bool crop = true;
  bool brightness = true;
  bool contrast = true;
  bool saturation = true;
  bool hue = true;
  int max_shift = 4;
  double brightness_range = 0.1;
  double contrast_range = 0.1;
  double saturation_range = 0.1;
  double hue_range = 0.05;

  bool any() const { return crop || brightness || contrast || saturation || hue; }
  static Augmentation none() { return {false, false, false, false, false}; }
};

struct AugmentDraw {
  int dx = 0, dy = 0;
  double brightness = 0.0, contrast = 1.0, saturation = 1.0, hue = 0.0;
};

inline AugmentDraw draw_augmentation(const Augmentation& a, std::mt19937_64& rng) {
  AugmentDraw d;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_int_distribution<int> shift(-a.max_shift, a.max_shift);
  if (a.crop) { d.dx = shift(rng); d.dy = shift(rng); }
  if (a.brightness) d.brightness = a.brightness_range * u(rng);
  if (a.contrast) d.contrast = 1.0 + a.contrast_range * u(rng);
  if (a.saturation) d.saturation = 1.0 + a.saturation_range * u(rng);
  if (a.hue) d.hue = a.hue_range * u(rng);
  return d;
}

/// Writes a CHW float image in [0, 1] after a shifted crop (edge replicate)
/// and colour jitter. Identity when `d` is default.
template <typename S>
void image_to_chw(const Rgb8& img, const AugmentDraw& d, S* out) {
  const int w = img.width, h = img.height, n = w * h;
  std::vector<double> px(std::size_t(n) * 3);
  double mean_luma = 0.0;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int sx = std::clamp(x + d.dx, 0, w - 1), sy = std::clamp(y + d.dy, 0, h - 1);
      const auto* p = img.px(sx, sy);
      for (int c = 0; c < 3; ++c) px[std::size_t(y * w + x) * 3 + std::size_t(c)] = p[c] / 255.0;
      mean_luma += 0.299 * p[0] / 255.0 + 0.587 * p[1] / 255.0 + 0.114 * p[2] / 255.0;
    }
  mean_luma /= n;
  const double ch = std::cos(d.hue), sh = std::sin(d.hue);
  for (int i = 0; i < n; ++i) {
    double* p = &px[std::size_t(i) * 3];
    for (int c = 0; c < 3; ++c) p[c] += d.brightness;
    for (int c = 0; c < 3; ++c) p[c] = mean_luma + d.contrast * (p[c] - mean_luma);
    double luma = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    for (int c = 0; c < 3; ++c) p[c] = luma + d.saturation * (p[c] - luma);
    if (d.hue != 0.0) {
      // rotate chroma in YIQ
      double Y = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
      double I = 0.596 * p[0] - 0.274 * p[1] - 0.322 * p[2];
      double Q = 0.211 * p[0] - 0.523 * p[1] + 0.312 * p[2];
      double I2 = ch * I - sh * Q, Q2 = sh * I + ch * Q;
      p[0] = Y + 0.956 * I2 + 0.621 * Q2;
      p[1] = Y - 0.272 * I2 - 0.647 * Q2;
      p[2] = Y - 1.106 * I2 + 1.703 * Q2;
    }
    for (int c = 0; c < 3; ++c) out[c * n + i] = S(std::clamp(p[c], 0.0, 1.0));
  }
}

// ---------------------------------------------------------------- configs

struct TrainConfig {
  double lr = 5e-4;
  int warmup_steps = 2000;
  int batch = 256;
  double lambda = 0.2;
  int steps = 3000;
  std::uint64_t seed = 0;
  int diffusion_steps = 50;
  double beta_start = 2e-3;
  double beta_end = 0.4;
  NetworkShape network;
  Augmentation augment;
  bool gradient_accumulation = false;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::filesystem::path abort_checkpoint;  ///< written before NonFiniteLoss is raised, when set

  void validate() const {
    require(lambda > 0.0, Errc::ConfigError, "lambda must be positive");
    require(batch >= 1, Errc::ConfigError, "batch must be at least 1");
    require(lr >= 0.0, Errc::ConfigError, "learning rate must be non-negative");
    require(warmup_steps >= 0 && steps >= 0, Errc::ConfigError, "step counts must be non-negative");
  }
  DiffusionSchedule schedule() const { return DiffusionSchedule::linear(diffusion_steps, beta_start, beta_end); }
};

inline nlohmann::json to_json(const NetworkShape& s) {
  return {{"mode", mode_name(s.mode)}, {"feature", s.feature}, {"hidden", s.hidden}, {"layers", s.layers},
          {"step_embed", s.step_embed}, {"image_size", s.image_size}, {"channels", s.channels}, {"groups", s.groups}};
}

inline NetworkShape network_shape_from_json(const nlohmann::json& j) {
  NetworkShape s;
  s.mode = mode_from_name(j.value("mode", "state"));
  s.feature = j.value("feature", s.feature);
  s.hidden = j.value("hidden", s.hidden);
  s.layers = j.value("layers", s.layers);
  s.step_embed = j.value("step_embed", s.step_embed);
  s.image_size = j.value("image_size", s.image_size);
  if (j.contains("channels")) s.channels = j.at("channels").get<std::array<int, 3>>();
  s.groups = j.value("groups", s.groups);
  return s;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr}, {"warmup_steps", c.warmup_steps}, {"batch", c.batch}, {"lambda", c.lambda},
          {"steps", c.steps}, {"seed", c.seed}, {"diffusion_steps", c.diffusion_steps},
          {"beta_start", c.beta_start}, {"beta_end", c.beta_end}, {"network", to_json(c.network)},
          {"augment",
           {{"crop", c.augment.crop}, {"brightness", c.augment.brightness}, {"contrast", c.augment.contrast},
            {"saturation", c.augment.saturation}, {"hue", c.augment.hue}}},
          {"gradient_accumulation", c.gradient_accumulation}};
}

/// Missing keys keep their defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.batch = j.value("batch", c.batch);
  c.lambda = j.value("lambda", c.lambda);
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.diffusion_steps = j.value("diffusion_steps", c.diffusion_steps);
  c.beta_start = j.value("beta_start", c.beta_start);
  c.beta_end = j.value("beta_end", c.beta_end);
  if (j.contains("network")) c.network = network_shape_from_json(j.at("network"));
  if (j.contains("augment")) {
    const auto& a = j.at("augment");
    c.augment.crop = a.value("crop", c.augment.crop);
    c.augment.brightness = a.value("brightness", c.augment.brightness);
    c.augment.contrast = a.value("contrast", c.augment.contrast);
    c.augment.saturation = a.value("saturation", c.augment.saturation);
    c.augment.hue = a.value("hue", c.augment.hue);
  }
  c.gradient_accumulation = j.value("gradient_accumulation", c.gradient_accumulation);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- batches and loss

template <typename S>
struct PreparedBatch {
  BatchInput<S> input;
  typename NoisePredictor<S>::Mat eps;  ///< 7 x B target noise
  typename NoisePredictor<S>::Mat x0;   ///< 7 x B clean encoded action
};

/// Per element: diffusion step, then 7 noise draws, then (image mode with
/// augmentation) one augmentation draw shared by o and o*.
template <typename S>
PreparedBatch<S> prepare_batch(std::span<const TrainingPair* const> pairs, const NetworkShape& shape,
                               const DiffusionSchedule& sched, const ActionCodec& codec, std::mt19937_64& rng,
                               const Augmentation& augment = Augmentation::none()) {
  require(!pairs.empty(), Errc::InvalidArgument, "batch is empty");
  const int B = int(pairs.size());
  PreparedBatch<S> pb;
  auto& in = pb.input;
  const int img = shape.image_size * shape.image_size;
  in.obs.resize(shape.mode == EncoderMode::State ? kStateDims : 6 * img, B);
  in.cond.resize(kActionDims, B);
  in.x.resize(kActionDims, B);
  in.steps.resize(std::size_t(B));
  pb.eps.resize(kActionDims, B);
  pb.x0.resize(kActionDims, B);
  std::uniform_int_distribution<int> step(1, sched.steps);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (int b = 0; b < B; ++b) {
    const TrainingPair& tp = *pairs[std::size_t(b)];
    int s = step(rng);
    Vec7 eps;
    for (auto& e : eps) e = normal(rng);
    Vec7 x0 = codec.encode(tp.a_star, tp.a);
    Vec7 xs = q_sample(x0, s, eps, sched);
    in.steps[std::size_t(b)] = s;
    for (int i = 0; i < kActionDims; ++i) {
      in.x(i, b) = S(xs[std::size_t(i)]);
      pb.eps(i, b) = S(eps[std::size_t(i)]);
      pb.x0(i, b) = S(x0[std::size_t(i)]);
    }
    codec.condition(tp.a, in.cond.col(b).data());
    if (shape.mode == EncoderMode::State) {
      for (int i = 0; i < 4; ++i) {
        in.obs(i, b) = S(tp.o.state[std::size_t(i)]);
        in.obs(4 + i, b) = S(tp.o_star.state[std::size_t(i)]);
      }
    } else {
      require(tp.o.image.width == shape.image_size && tp.o.image.height == shape.image_size &&
                  tp.o_star.image.width == shape.image_size && tp.o_star.image.height == shape.image_size,
              Errc::DimensionMismatch, "observation image size does not match the encoder");
      AugmentDraw d = augment.any() ? draw_augmentation(augment, rng) : AugmentDraw{};
      image_to_chw<S>(tp.o.image, d, in.obs.col(b).data());
      image_to_chw<S>(tp.o_star.image, d, in.obs.col(b).data() + 3 * img);
    }
  }
  return pb;
}

struct LossTerms {
  double total = 0.0;
  double position_mse = 0.0;  ///< batch mean of the squared position-noise error norm
  double rotation_mse = 0.0;  ///< batch mean of the squared rotation-noise error norm
};

template <typename Mat>
LossTerms loss_terms(const Mat& pred, const Mat& eps, double lambda) {
  const int B = int(eps.cols());
  LossTerms t;
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < 3; ++i) {
      double e = double(eps(i, b)) - double(pred(i, b));
      t.position_mse += e * e;
    }
    for (int i = 3; i < kActionDims; ++i) {
      double e = double(eps(i, b)) - double(pred(i, b));
      t.rotation_mse += e * e;
    }
  }
  t.position_mse /= B;
  t.rotation_mse /= B;
  t.total = lambda * t.position_mse + t.rotation_mse;
  return t;
}

template <typename Mat>
Mat loss_gradient(const Mat& pred, const Mat& eps, double lambda) {
  using S = typename Mat::Scalar;
  const S B = S(eps.cols());
  Mat g = (pred - eps) * (S(2) / B);
  g.topRows(3) *= S(lambda);
  return g;
}

/// Monte-Carlo estimate of the weighted noise-prediction objective.
template <typename S>
LossTerms loss(std::span<const TrainingPair* const> batch, const std::vector<S>& params, const NoisePredictor<S>& net,
               const DiffusionSchedule& sched, const TrainConfig& cfg, std::mt19937_64& rng,
               const ActionCodec& codec = {}) {
  auto pb = prepare_batch<S>(batch, net.shape(), sched, codec, rng,
                             net.shape().mode == EncoderMode::Image ? cfg.augment : Augmentation::none());
  auto pred = net.forward(params.data(), pb.input);
  auto t = loss_terms(pred, pb.eps, cfg.lambda);
  if (!std::isfinite(t.total)) fail(Errc::NonFiniteLoss, "loss is not finite");
  return t;
}

// ---------------------------------------------------------------- model

struct PolicyModel {
  NetworkShape shape;
  DiffusionSchedule schedule = DiffusionSchedule::linear();
  ActionCodec codec;
  std::vector<float> params;
  nlohmann::json meta = nlohmann::json::object();
};

inline PolicyModel init_model(const NetworkShape& shape, const DiffusionSchedule& sched, std::uint64_t seed) {
  PolicyModel m;
  m.shape = shape;
  m.schedule = sched;
  std::mt19937_64 rng(seed);
  m.params = NoisePredictor<float>(shape).init(rng);
  return m;
}

// ---------------------------------------------------------------- checkpoints

inline constexpr char kCheckpointMagic[4] = {'R', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {
template <typename T>
void put(std::ostream& os, T v) { os.write(reinterpret_cast<const char*>(&v), sizeof v); }
template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!is) fail(Errc::IoError, "truncated checkpoint");
  return v;
}
}  // namespace detail

inline std::filesystem::path metadata_path(const std::filesystem::path& ckpt) {
  auto p = ckpt;
  p += ".json";
  return p;
}

/// Binary blob (magic, version, named tensors with shapes, row-major float32)
/// plus a JSON sidecar holding the network shape, schedule and codec.
inline void save_checkpoint(const std::filesystem::path& path, const PolicyModel& m) {
  NoisePredictor<float> net(m.shape);
  require(m.params.size() == net.num_params(), Errc::DimensionMismatch, "parameter count does not match the network");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(Errc::IoError, "cannot write " + path.string());
  os.write(kCheckpointMagic, 4);
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint32_t>(os, std::uint32_t(net.layout().tensors().size()));
  for (const auto& t : net.layout().tensors()) {
    detail::put<std::uint32_t>(os, std::uint32_t(t.name.size()));
    os.write(t.name.data(), std::streamsize(t.name.size()));
    detail::put<std::uint32_t>(os, std::uint32_t(t.shape.size()));
    for (int d : t.shape) detail::put<std::uint32_t>(os, std::uint32_t(d));
    os.write(reinterpret_cast<const char*>(m.params.data() + t.offset), std::streamsize(t.size() * sizeof(float)));
  }
  nlohmann::json meta = m.meta;
  meta["format_version"] = kCheckpointVersion;
  meta["network"] = to_json(m.shape);
  meta["schedule"] = {{"steps", m.schedule.steps}, {"beta", m.schedule.beta}};
  meta["codec"] = {{"position_scale", m.codec.position_scale}, {"condition_scale", m.codec.condition_scale}};
  std::ofstream(metadata_path(path)) << meta.dump(2) << "\n";
}

inline PolicyModel load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) fail(Errc::ConfigError, "checkpoint " + path.string() + " does not exist");
  std::ifstream ms(metadata_path(path));
  if (!ms) fail(Errc::IoError, "missing checkpoint metadata " + metadata_path(path).string());
  PolicyModel m;
  m.meta = nlohmann::json::parse(ms);
  m.shape = network_shape_from_json(m.meta.at("network"));
  const auto& sj = m.meta.at("schedule");
  m.schedule = DiffusionSchedule{};
  m.schedule.steps = sj.at("steps").get<int>();
  m.schedule.beta = sj.at("beta").get<std::vector<double>>();
  double prod = 1.0;
  for (double b : m.schedule.beta) {
    m.schedule.alpha.push_back(1.0 - b);
    prod *= 1.0 - b;
    m.schedule.alpha_bar.push_back(prod);
  }
  m.schedule.validate();
  m.codec.position_scale = m.meta.at("codec").at("position_scale").get<double>();
  m.codec.condition_scale = m.meta.at("codec").at("condition_scale").get<double>();

  NoisePredictor<float> net(m.shape);
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kCheckpointMagic, 4) != 0) fail(Errc::IoError, path.string() + " is not a checkpoint");
  auto version = detail::get<std::uint32_t>(is);
  if (version != kCheckpointVersion) fail(Errc::IoError, "unsupported checkpoint version " + std::to_string(version));
  auto count = detail::get<std::uint32_t>(is);
  if (count != net.layout().tensors().size()) fail(Errc::DimensionMismatch, "checkpoint tensor count mismatch");
  m.params.assign(net.num_params(), 0.0f);
  for (const auto& t : net.layout().tensors()) {
    auto len = detail::get<std::uint32_t>(is);
    std::string name(len, '\0');
    is.read(name.data(), len);
    if (name != t.name) fail(Errc::DimensionMismatch, "checkpoint tensor '" + name + "' where '" + t.name + "' expected");
    auto nd = detail::get<std::uint32_t>(is);
    if (nd != t.shape.size()) fail(Errc::DimensionMismatch, "rank mismatch for " + name);
    for (int d : t.shape)
      if (detail::get<std::uint32_t>(is) != std::uint32_t(d)) fail(Errc::DimensionMismatch, "shape mismatch for " + name);
    is.read(reinterpret_cast<char*>(m.params.data() + t.offset), std::streamsize(t.size() * sizeof(float)));
    if (!is) fail(Errc::IoError, "truncated checkpoint payload");
  }
  return m;
}

// ---------------------------------------------------------------- training

struct TrainResult {
  PolicyModel model;
  std::vector<double> loss_curve;  ///< one entry per optimisation step
};

inline std::string loss_curve_csv(const std::vector<double>& curve) {
  std::ostringstream os;
  os.precision(9);
  os << "step,loss\n";
  for (std::size_t i = 0; i < curve.size(); ++i) os << i << "," << curve[i] << "\n";
  return os.str();
}

/// Draws batches from a reshuffled pass over the dataset. With gradient
/// accumulation a batch larger than the dataset cycles through several passes.
class BatchSampler {
 public:
  BatchSampler(std::size_t n, std::mt19937_64& rng) : n_(n), rng_(rng) { reshuffle(); }

  std::vector<std::size_t> next(int batch) {
    std::vector<std::size_t> out;
    out.reserve(std::size_t(batch));
    while (int(out.size()) < batch) {
      if (pos_ == order_.size()) reshuffle();
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::size_t n_;
  std::mt19937_64& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

/// Adam with bias correction and linear warmup. Deterministic given cfg.seed.
inline TrainResult train(std::span<const TrainingPair> data, const TrainConfig& cfg,
                         const std::function<void(int, double)>& on_step = {}) {
  cfg.validate();
  require(!data.empty(), Errc::InvalidArgument, "training set is empty");
  if (int(data.size()) < cfg.batch && !cfg.gradient_accumulation)
    fail(Errc::ConfigError, "dataset smaller than the batch; enable gradient accumulation");

  TrainResult res;
  auto& model = res.model;
  model.shape = cfg.network;
  model.schedule = cfg.schedule();
  std::mt19937_64 rng(cfg.seed);
  NoisePredictor<float> net(model.shape);
  model.params = net.init(rng);
  model.meta["train"] = to_json(cfg);

  const std::size_t P = net.num_params();
  std::vector<double> m1(P, 0.0), m2(P, 0.0);
  std::vector<float> grad(P);
  BatchSampler sampler(data.size(), rng);
  const Augmentation aug = model.shape.mode == EncoderMode::Image ? cfg.augment : Augmentation::none();

  for (int step = 0; step < cfg.steps; ++step) {
    auto idx = sampler.next(cfg.batch);
    std::vector<const TrainingPair*> batch;
    for (auto i : idx) batch.push_back(&data[i]);
    auto pb = prepare_batch<float>(batch, model.shape, model.schedule, model.codec, rng, aug);
    NoisePredictor<float>::Tape tape;
    auto pred = net.forward(model.params.data(), pb.input, &tape);
    auto terms = loss_terms(pred, pb.eps, cfg.lambda);
    if (!std::isfinite(terms.total)) {
      if (!cfg.abort_checkpoint.empty()) {
        model.meta["aborted_at_step"] = step;
        save_checkpoint(cfg.abort_checkpoint, model);
      }
      fail(Errc::NonFiniteLoss, "loss became non-finite at step " + std::to_string(step));
    }
    res.loss_curve.push_back(terms.total);
    if (on_step) on_step(step, terms.total);

    std::fill(grad.begin(), grad.end(), 0.0f);
    net.backward(model.params.data(), pb.input, tape, loss_gradient(pred, pb.eps, cfg.lambda), grad.data());

    const double lr = cfg.lr * std::min(1.0, double(step + 1) / std::max(1, cfg.warmup_steps));
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, step + 1);
    const double c2 = 1.0 - std::pow(cfg.adam_beta2, step + 1);
    for (std::size_t i = 0; i < P; ++i) {
      double g = grad[i];
      m1[i] = cfg.adam_beta1 * m1[i] + (1.0 - cfg.adam_beta1) * g;
      m2[i] = cfg.adam_beta2 * m2[i] + (1.0 - cfg.adam_beta2) * g * g;
      double upd = lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + cfg.adam_eps);
      model.params[i] = float(double(model.params[i]) - upd);
    }
  }
  model.meta["final_loss"] = res.loss_curve.empty() ? 0.0 : res.loss_curve.back();
  return res;
}

inline TrainResult train(const std::vector<TrainingPair>& data, const TrainConfig& cfg,
                         const std::function<void(int, double)>& on_step = {}) {
  return train(std::span<const TrainingPair>(data), cfg, on_step);
}

// ---------------------------------------------------------------- sampling

/// Reverse DDPM from Gaussian noise using the posterior variance, conditioned
/// on (o, o*, a_current). The result is post-processed by the codec.
inline Action8 sample_action(const PolicyModel& model, const PolicyObservation& o, const PolicyObservation& o_star,
                             const Action8& current, std::mt19937_64& rng) {
  NoisePredictor<float> net(model.shape);
  require(model.params.size() == net.num_params(), Errc::DimensionMismatch, "parameter count does not match the network");
  TrainingPair tp{o, current, o_star, current};
  const TrainingPair* ptr = &tp;
  std::mt19937_64 scratch(0);
  auto pb = prepare_batch<float>(std::span<const TrainingPair* const>(&ptr, 1), model.shape, model.schedule,
                                 model.codec, scratch);
  std::normal_distribution<double> normal(0.0, 1.0);
  Vec7 x;
  for (auto& v : x) v = normal(rng);
  const auto& sched = model.schedule;
  for (int s = sched.steps; s >= 1; --s) {
    for (int i = 0; i < kActionDims; ++i) pb.input.x(i, 0) = float(x[std::size_t(i)]);
    pb.input.steps[0] = s;
    auto eps = net.forward(model.params.data(), pb.input);
    const double a = sched.alpha_at(s), ab = sched.alpha_bar_at(s), b = sched.beta_at(s);
    for (int i = 0; i < kActionDims; ++i)
      x[std::size_t(i)] = (x[std::size_t(i)] - b / std::sqrt(1.0 - ab) * double(eps(i, 0))) / std::sqrt(a);
    if (s > 1) {
      const double sd = std::sqrt(sched.posterior_variance(s));
      for (auto& v : x) v += sd * normal(rng);
    }
  }
  return model.codec.decode(x, current);
}

// ---------------------------------------------------------------- gradient check

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

using GradientFn = std::function<std::vector<double>(const NoisePredictor<double>&, const std::vector<double>&,
                                                      const PreparedBatch<double>&, double)>;

inline std::vector<double> analytic_gradient(const NoisePredictor<double>& net, const std::vector<double>& params,
                                             const PreparedBatch<double>& pb, double lambda) {
  NoisePredictor<double>::Tape tape;
  auto pred = net.forward(params.data(), pb.input, &tape);
  std::vector<double> g(params.size(), 0.0);
  net.backward(params.data(), pb.input, tape, loss_gradient(pred, pb.eps, lambda), g.data());
  return g;
}

/// Central differences (step h) on `indices` against `grad_fn`, with relative
/// error |a - n| / max(|a| + |n|, 1e-6).
inline GradCheckReport gradient_check(const NoisePredictor<double>& net, std::vector<double> params,
                                      const PreparedBatch<double>& pb, double lambda,
                                      const std::vector<std::size_t>& indices, double tolerance,
                                      const GradientFn& grad_fn = analytic_gradient, double h = 1e-4) {
  require(pb.input.batch() <= 4, Errc::InvalidArgument, "gradient check expects a batch of at most 4");
  auto analytic = grad_fn(net, params, pb, lambda);
  auto eval = [&]() { return loss_terms(net.forward(params.data(), pb.input), pb.eps, lambda).total; };
  GradCheckReport r;
  for (auto i : indices) {
    const double orig = params[i];
    params[i] = orig + h;
    double up = eval();
    params[i] = orig - h;
    double down = eval();
    params[i] = orig;
    double numeric = (up - down) / (2 * h);
    double a = analytic[i];
    if (!std::isfinite(a) || !std::isfinite(numeric)) fail(Errc::GradientMismatch, "non-finite gradient");
    double rel = std::fabs(a - numeric) / std::max(std::fabs(a) + std::fabs(numeric), 1e-6);
    ++r.checked;
    if (rel >= r.max_rel_error) {
      r.max_rel_error = rel;
      r.worst_index = i;
      r.worst_analytic = a;
      r.worst_numeric = numeric;
    }
  }
  if (r.max_rel_error > tolerance)
    fail(Errc::GradientMismatch, "max relative gradient error " + std::to_string(r.max_rel_error) + " exceeds " +
                                     std::to_string(tolerance));
  return r;
}

}  // namespace regrasp::policy
