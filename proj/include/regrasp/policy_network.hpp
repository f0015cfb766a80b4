#pragma once

// Noise-prediction network with hand-written backward passes. Parameters live
// in one flat vector; layers view slices of it through Eigen maps.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "regrasp/error.hpp"

namespace regrasp::policy {

enum class EncoderMode { State, Image };

inline const char* mode_name(EncoderMode m) { return m == EncoderMode::State ? "state" : "image"; }

inline EncoderMode mode_from_name(const std::string& s) {
  if (s == "state") return EncoderMode::State;
  if (s == "image") return EncoderMode::Image;
  fail(Errc::ConfigError, "unknown encoder mode '" + s + "'");
}

inline constexpr int kActionDims = 7;  // position 3 + quaternion 4
inline constexpr int kStateDims = 8;   // object pose features for o and o*

struct NetworkShape {
  EncoderMode mode = EncoderMode::State;
  int feature = 64;
  int hidden = 256;
  int layers = 3;
  int step_embed = 16;
  int image_size = 128;
  std::array<int, 3> channels{16, 32, 32};
  int groups = 4;

  int trunk_input() const { return feature + kActionDims + kActionDims + step_embed; }
  friend bool operator==(const NetworkShape&, const NetworkShape&) = default;
};

struct TensorSpec {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size() const {
    std::size_t n = 1;
    for (int d : shape) n *= std::size_t(d);
    return n;
  }
};

class ParamLayout {
 public:
  std::size_t add(std::string name, std::vector<int> shape) {
    TensorSpec t{std::move(name), std::move(shape), total_};
    total_ += t.size();
    tensors_.push_back(std::move(t));
    return tensors_.back().offset;
  }
  std::size_t size() const { return total_; }
  const std::vector<TensorSpec>& tensors() const { return tensors_; }

 private:
  std::vector<TensorSpec> tensors_;
  std::size_t total_ = 0;
};

/// Sinusoidal embedding of the diffusion step.
template <typename S>
void step_embedding(int step, int dims, S* out) {
  const int half = dims / 2;
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(1000.0) * i / half);
    out[i] = S(std::sin(step * freq));
    out[half + i] = S(std::cos(step * freq));
  }
}

template <typename S>
struct BatchInput {
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  Mat obs;     ///< state: 8 x B; image: (6 * size * size) x B, channel-major per column
  Mat cond;    ///< 7 x B current-action condition
  Mat x;       ///< 7 x B noisy action
  std::vector<int> steps;
  int batch() const { return int(x.cols()); }
};

template <typename S>
class NoisePredictor {
 public:
  using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  struct Linear {
    std::size_t w = 0, b = 0;
    int in = 0, out = 0;
  };
  struct ConvBlock {
    std::size_t w = 0, b = 0, gamma = 0, beta = 0;
    int cin = 0, cout = 0, size_in = 0;
  };

  /// Activations kept for the backward pass.
  struct Tape {
    std::vector<Mat> conv_in, gn_in, gn_hat, gn_out;
    std::vector<Mat> gn_invstd;  // groups x B
    Mat pooled;
    Mat enc_pre;
    Mat trunk_in;
    std::vector<Mat> pre;   // trunk pre-activations
    std::vector<Mat> post;  // trunk post-activations
  };

  explicit NoisePredictor(NetworkShape shape = {}) : shape_(shape) {
    require(shape.layers >= 1 && shape.hidden >= 1 && shape.feature >= 1, Errc::InvalidArgument, "bad network shape");
    require(shape.step_embed % 2 == 0, Errc::InvalidArgument, "step embedding must be even");
    if (shape.mode == EncoderMode::Image) {
      require(shape.image_size % 8 == 0, Errc::InvalidArgument, "image size must be divisible by 8");
      int cin = 6, size = shape.image_size;
      for (int k = 0; k < 3; ++k) {
        int cout = shape.channels[std::size_t(k)];
        require(cout % shape.groups == 0, Errc::InvalidArgument, "channels must divide into groups");
        ConvBlock c;
        c.cin = cin;
        c.cout = cout;
        c.size_in = size;
        std::string p = "enc.conv" + std::to_string(k);
        c.w = layout_.add(p + ".weight", {cout, cin * 9});
        c.b = layout_.add(p + ".bias", {cout});
        c.gamma = layout_.add(p + ".gn_gamma", {cout});
        c.beta = layout_.add(p + ".gn_beta", {cout});
        convs_.push_back(c);
        cin = cout;
        size /= 2;
      }
      encoder_ = add_linear("enc.proj", cin, shape.feature);
    } else {
      encoder_ = add_linear("enc.proj", kStateDims, shape.feature);
    }
    int in = shape.trunk_input();
    for (int l = 0; l < shape.layers; ++l) {
      trunk_.push_back(add_linear("trunk." + std::to_string(l), in, shape.hidden));
      in = shape.hidden;
    }
    head_ = add_linear("head", in, kActionDims);
  }

  const NetworkShape& shape() const { return shape_; }
  const ParamLayout& layout() const { return layout_; }
  std::size_t num_params() const { return layout_.size(); }

  /// Uniform fan-in initialisation, zero biases, unit GroupNorm gain.
  std::vector<S> init(std::mt19937_64& rng) const {
    std::vector<S> p(layout_.size(), S(0));
    auto fill = [&](std::size_t off, std::size_t n, double bound) {
      std::uniform_real_distribution<double> u(-bound, bound);
      for (std::size_t i = 0; i < n; ++i) p[off + i] = S(u(rng));
    };
    for (const auto& c : convs_) {
      fill(c.w, std::size_t(c.cout) * c.cin * 9, std::sqrt(6.0 / (c.cin * 9)));
      for (int i = 0; i < c.cout; ++i) p[c.gamma + std::size_t(i)] = S(1);
    }
    fill(encoder_.w, std::size_t(encoder_.in) * encoder_.out, std::sqrt(6.0 / encoder_.in));
    for (const auto& l : trunk_) fill(l.w, std::size_t(l.in) * l.out, std::sqrt(6.0 / l.in));
    fill(head_.w, std::size_t(head_.in) * head_.out, std::sqrt(1.0 / head_.in));
    return p;
  }

  Mat forward(const S* params, const BatchInput<S>& in, Tape* tape = nullptr) const {
    const int B = in.batch();
    require(in.cond.rows() == kActionDims && in.cond.cols() == B && in.x.rows() == kActionDims &&
                int(in.steps.size()) == B,
            Errc::DimensionMismatch, "batch input shapes disagree");
    Tape local;
    Tape& t = tape ? *tape : local;

    Mat enc_in;
    if (shape_.mode == EncoderMode::Image) {
      require(in.obs.rows() == 6 * shape_.image_size * shape_.image_size && in.obs.cols() == B,
              Errc::DimensionMismatch, "image batch has the wrong size");
      t.conv_in.assign(convs_.size(), {});
      t.gn_in.assign(convs_.size(), {});
      t.gn_hat.assign(convs_.size(), {});
      t.gn_out.assign(convs_.size(), {});
      t.gn_invstd.assign(convs_.size(), {});
      Mat h = in.obs;
      for (std::size_t k = 0; k < convs_.size(); ++k) {
        const auto& c = convs_[k];
        t.conv_in[k] = h;
        t.gn_in[k] = conv_forward(params, c, h);
        group_norm_forward(params, c, t.gn_in[k], t.gn_hat[k], t.gn_invstd[k], t.gn_out[k]);
        h = swish(t.gn_out[k]);
      }
      const auto& last = convs_.back();
      const int hw = (last.size_in / 2) * (last.size_in / 2);
      t.pooled.resize(last.cout, B);
      for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < last.cout; ++ch) t.pooled(ch, b) = h.col(b).segment(ch * hw, hw).mean();
      enc_in = t.pooled;
    } else {
      require(in.obs.rows() == kStateDims && in.obs.cols() == B, Errc::DimensionMismatch, "state batch has the wrong size");
      enc_in = in.obs;
    }
    t.enc_pre = linear(params, encoder_, enc_in);
    Mat feat = swish(t.enc_pre);

    t.trunk_in.resize(shape_.trunk_input(), B);
    t.trunk_in.topRows(shape_.feature) = feat;
    t.trunk_in.middleRows(shape_.feature, kActionDims) = in.cond;
    t.trunk_in.middleRows(shape_.feature + kActionDims, kActionDims) = in.x;
    for (int b = 0; b < B; ++b)
      step_embedding<S>(in.steps[std::size_t(b)], shape_.step_embed,
                        t.trunk_in.col(b).data() + shape_.feature + 2 * kActionDims);

    t.pre.assign(trunk_.size(), {});
    t.post.assign(trunk_.size(), {});
    const Mat* h = &t.trunk_in;
    for (std::size_t l = 0; l < trunk_.size(); ++l) {
      t.pre[l] = linear(params, trunk_[l], *h);
      t.post[l] = swish(t.pre[l]);
      h = &t.post[l];
    }
    return linear(params, head_, *h);
  }

  /// Accumulates dLoss/dparams into `grad` given dLoss/doutput.
  void backward(const S* params, const BatchInput<S>& in, const Tape& t, const Mat& d_out, S* grad) const {
    const Mat& last_in = trunk_.empty() ? t.trunk_in : t.post.back();
    Mat d = linear_backward(params, head_, last_in, d_out, grad);
    for (std::size_t l = trunk_.size(); l-- > 0;) {
      d = swish_backward(t.pre[l], d);
      d = linear_backward(params, trunk_[l], l == 0 ? t.trunk_in : t.post[l - 1], d, grad);
    }
    Mat d_feat = d.topRows(shape_.feature);
    d_feat = swish_backward(t.enc_pre, d_feat);
    if (shape_.mode == EncoderMode::State) {
      linear_backward(params, encoder_, in.obs, d_feat, grad);
      return;
    }
    Mat d_pool = linear_backward(params, encoder_, t.pooled, d_feat, grad);
    const auto& last = convs_.back();
    const int hw = (last.size_in / 2) * (last.size_in / 2);
    Mat dh(last.cout * hw, d_pool.cols());
    for (int b = 0; b < int(d_pool.cols()); ++b)
      for (int ch = 0; ch < last.cout; ++ch) dh.col(b).segment(ch * hw, hw).setConstant(d_pool(ch, b) / S(hw));
    for (std::size_t k = convs_.size(); k-- > 0;) {
      const auto& c = convs_[k];
      dh = swish_backward(t.gn_out[k], dh);
      dh = group_norm_backward(params, c, t.gn_hat[k], t.gn_invstd[k], dh, grad);
      dh = conv_backward(params, c, t.conv_in[k], dh, grad, k > 0);
    }
  }

 private:
  Linear add_linear(const std::string& name, int in, int out) {
    Linear l;
    l.in = in;
    l.out = out;
    l.w = layout_.add(name + ".weight", {out, in});
    l.b = layout_.add(name + ".bias", {out});
    return l;
  }

  static Mat swish(const Mat& x) {
    return x.unaryExpr([](S v) { return v / (S(1) + std::exp(-v)); });
  }
  static Mat swish_backward(const Mat& x, const Mat& dy) {
    Mat g = x.unaryExpr([](S v) {
      S s = S(1) / (S(1) + std::exp(-v));
      return s + v * s * (S(1) - s);
    });
    return dy.cwiseProduct(g);
  }

  static Mat linear(const S* p, const Linear& l, const Mat& x) {
    Eigen::Map<const RowMat> W(p + l.w, l.out, l.in);
    Eigen::Map<const Vec> b(p + l.b, l.out);
    Mat y = W * x;
    y.colwise() += b;
    return y;
  }
  static Mat linear_backward(const S* p, const Linear& l, const Mat& x, const Mat& dy, S* g) {
    Eigen::Map<const RowMat> W(p + l.w, l.out, l.in);
    Eigen::Map<RowMat> gW(g + l.w, l.out, l.in);
    Eigen::Map<Vec> gb(g + l.b, l.out);
    gW.noalias() += dy * x.transpose();
    gb += dy.rowwise().sum();
    return W.transpose() * dy;
  }

  // 3x3 convolution, stride 2, zero padding 1; one column per sample, channel-major.
  static void im2col(const S* in, int cin, int size, RowMat& cols) {
    const int so = size / 2;
    cols.setZero(cin * 9, so * so);
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          S* row = cols.row(c * 9 + ky * 3 + kx).data();
          for (int oy = 0; oy < so; ++oy) {
            int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= size) continue;
            for (int ox = 0; ox < so; ++ox) {
              int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= size) continue;
              row[oy * so + ox] = in[(c * size + iy) * size + ix];
            }
          }
        }
  }
  static void col2im(const RowMat& cols, int cin, int size, S* out) {
    const int so = size / 2;
    for (int c = 0; c < cin; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          const S* row = cols.row(c * 9 + ky * 3 + kx).data();
          for (int oy = 0; oy < so; ++oy) {
            int iy = 2 * oy + ky - 1;
            if (iy < 0 || iy >= size) continue;
            for (int ox = 0; ox < so; ++ox) {
              int ix = 2 * ox + kx - 1;
              if (ix < 0 || ix >= size) continue;
              out[(c * size + iy) * size + ix] += row[oy * so + ox];
            }
          }
        }
  }

  static Mat conv_forward(const S* p, const ConvBlock& c, const Mat& x) {
    const int so = c.size_in / 2;
    Eigen::Map<const RowMat> W(p + c.w, c.cout, c.cin * 9);
    Eigen::Map<const Vec> b(p + c.b, c.cout);
    Mat y(c.cout * so * so, x.cols());
    RowMat cols;
    for (int s = 0; s < int(x.cols()); ++s) {
      im2col(x.col(s).data(), c.cin, c.size_in, cols);
      Eigen::Map<RowMat> out(y.col(s).data(), c.cout, so * so);
      out.noalias() = W * cols;
      out.colwise() += b;
    }
    return y;
  }
  static Mat conv_backward(const S* p, const ConvBlock& c, const Mat& x, const Mat& dy, S* g, bool need_dx) {
    const int so = c.size_in / 2;
    Eigen::Map<const RowMat> W(p + c.w, c.cout, c.cin * 9);
    Eigen::Map<RowMat> gW(g + c.w, c.cout, c.cin * 9);
    Eigen::Map<Vec> gb(g + c.b, c.cout);
    Mat dx;
    if (need_dx) dx.setZero(x.rows(), x.cols());
    RowMat cols, dcols;
    for (int s = 0; s < int(x.cols()); ++s) {
      im2col(x.col(s).data(), c.cin, c.size_in, cols);
      Eigen::Map<const RowMat> d(dy.col(s).data(), c.cout, so * so);
      gW.noalias() += d * cols.transpose();
      gb += d.rowwise().sum();
      if (need_dx) {
        dcols.noalias() = W.transpose() * d;
        col2im(dcols, c.cin, c.size_in, dx.col(s).data());
      }
    }
    return dx;
  }

  void group_norm_forward(const S* p, const ConvBlock& c, const Mat& x, Mat& hat, Mat& invstd, Mat& y) const {
    const int hw = (c.size_in / 2) * (c.size_in / 2);
    const int per = c.cout / shape_.groups;
    const S eps = S(1e-5);
    hat.resize(x.rows(), x.cols());
    y.resize(x.rows(), x.cols());
    invstd.resize(shape_.groups, x.cols());
    for (int s = 0; s < int(x.cols()); ++s)
      for (int gi = 0; gi < shape_.groups; ++gi) {
        auto seg = x.col(s).segment(gi * per * hw, per * hw);
        S mean = seg.mean();
        S var = (seg.array() - mean).square().mean();
        S is = S(1) / std::sqrt(var + eps);
        invstd(gi, s) = is;
        hat.col(s).segment(gi * per * hw, per * hw) = (seg.array() - mean) * is;
      }
    for (int s = 0; s < int(x.cols()); ++s)
      for (int ch = 0; ch < c.cout; ++ch)
        y.col(s).segment(ch * hw, hw) = hat.col(s).segment(ch * hw, hw).array() * p[c.gamma + std::size_t(ch)] +
                                        p[c.beta + std::size_t(ch)];
  }
  Mat group_norm_backward(const S* p, const ConvBlock& c, const Mat& hat, const Mat& invstd, const Mat& dy,
                          S* g) const {
    const int hw = (c.size_in / 2) * (c.size_in / 2);
    const int per = c.cout / shape_.groups;
    const S n = S(per * hw);
    Mat dhat(dy.rows(), dy.cols());
    for (int s = 0; s < int(dy.cols()); ++s)
      for (int ch = 0; ch < c.cout; ++ch) {
        auto d = dy.col(s).segment(ch * hw, hw);
        auto h = hat.col(s).segment(ch * hw, hw);
        g[c.gamma + std::size_t(ch)] += d.dot(h);
        g[c.beta + std::size_t(ch)] += d.sum();
        dhat.col(s).segment(ch * hw, hw) = d * p[c.gamma + std::size_t(ch)];
      }
    Mat dx(dy.rows(), dy.cols());
    for (int s = 0; s < int(dy.cols()); ++s)
      for (int gi = 0; gi < shape_.groups; ++gi) {
        auto dh = dhat.col(s).segment(gi * per * hw, per * hw);
        auto h = hat.col(s).segment(gi * per * hw, per * hw);
        S sum_d = dh.sum();
        S sum_dh = dh.dot(h);
        dx.col(s).segment(gi * per * hw, per * hw) =
            (invstd(gi, s) / n) * (n * dh.array() - sum_d - h.array() * sum_dh);
      }
    return dx;
  }

  NetworkShape shape_;
  ParamLayout layout_;
  std::vector<ConvBlock> convs_;
  Linear encoder_;
  std::vector<Linear> trunk_;
  Linear head_;
};

}  // namespace regrasp::policy
