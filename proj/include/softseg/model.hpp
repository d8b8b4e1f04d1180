#pragma once

// MiniUNet: a two-level U-Net with hand-written forward and reverse passes.
//
//   enc1  conv3x3 3->16, relu, conv3x3 16->16, relu          (skip)
//   pool  2x2 max
//   enc2  conv3x3 16->32, relu, conv3x3 32->32, relu
//   up    nearest x2
//   dec   concat(skip, up) 48, conv3x3 48->16, relu, conv3x3 16->16, relu
//   head  conv1x1 16->C
//
// All convolutions are zero padded. Parameters live in one flat vector so the
// optimizer and checkpoint code can treat them uniformly. Tensors are C×H×W
// per image; batches are processed image by image and reduced in order.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "softseg/core.hpp"
#include "softseg/fusion.hpp"
#include "softseg/parallel.hpp"
#include "softseg/random.hpp"

namespace softseg {

struct ConvSpec {
  const char* name;
  int in;
  int out;
  int kernel;
};

inline constexpr int kEnc1 = 16, kEnc2 = 32, kDec = 16;

inline std::array<ConvSpec, 7> mini_unet_layers(int classes) {
  return {{{"enc1a", 3, kEnc1, 3},
           {"enc1b", kEnc1, kEnc1, 3},
           {"enc2a", kEnc1, kEnc2, 3},
           {"enc2b", kEnc2, kEnc2, 3},
           {"dec1", kEnc1 + kEnc2, kDec, 3},
           {"dec2", kDec, kDec, 3},
           {"head", kDec, classes, 1}}};
}

struct TensorInfo {
  std::string name;
  std::vector<int> shape;
  std::size_t offset = 0;
  std::size_t size = 0;
};

namespace detail {

// y[o] += sum_i w[o][i] * shift(x[i]) for a k×k zero-padded convolution.
template <typename T>
void conv_forward(const T* x, int in, int h, int w, const T* weight, const T* bias, int out, int k, T* y) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int o = 0; o < out; ++o) {
    T* yo = y + o * plane;
    std::fill(yo, yo + plane, bias[o]);
    for (int i = 0; i < in; ++i) {
      const T* xi = x + i * plane;
      const T* wk = weight + (static_cast<std::size_t>(o) * in + i) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int dy = ky - pad;
        const int r0 = std::max(0, -dy), r1 = std::min(h, h - dy);
        for (int kx = 0; kx < k; ++kx) {
          const int dx = kx - pad;
          const int c0 = std::max(0, -dx), c1 = std::min(w, w - dx);
          const T wv = wk[ky * k + kx];
          for (int r = r0; r < r1; ++r) {
            T* yr = yo + static_cast<std::size_t>(r) * w;
            const T* xr = xi + static_cast<std::size_t>(r + dy) * w + dx;
            for (int c = c0; c < c1; ++c) yr[c] += wv * xr[c];
          }
        }
      }
    }
  }
}

// Accumulates dW, db and (if dx != nullptr) dx from dy.
template <typename T>
void conv_backward(const T* x, int in, int h, int w, const T* weight, int out, int k, const T* dy, T* dweight,
                   T* dbias, T* dx) {
  const int pad = k / 2;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int o = 0; o < out; ++o) {
    const T* go = dy + o * plane;
    T bsum = 0;
    for (std::size_t p = 0; p < plane; ++p) bsum += go[p];
    dbias[o] += bsum;
    for (int i = 0; i < in; ++i) {
      const T* xi = x + i * plane;
      T* gxi = dx ? dx + i * plane : nullptr;
      const std::size_t wbase = (static_cast<std::size_t>(o) * in + i) * k * k;
      for (int ky = 0; ky < k; ++ky) {
        const int sy = ky - pad;
        const int r0 = std::max(0, -sy), r1 = std::min(h, h - sy);
        for (int kx = 0; kx < k; ++kx) {
          const int sx = kx - pad;
          const int c0 = std::max(0, -sx), c1 = std::min(w, w - sx);
          const T wv = weight[wbase + ky * k + kx];
          T acc = 0;
          for (int r = r0; r < r1; ++r) {
            const T* gr = go + static_cast<std::size_t>(r) * w;
            const T* xr = xi + static_cast<std::size_t>(r + sy) * w + sx;
            for (int c = c0; c < c1; ++c) acc += gr[c] * xr[c];
            if (gxi) {
              T* dxr = gxi + static_cast<std::size_t>(r + sy) * w + sx;
              for (int c = c0; c < c1; ++c) dxr[c] += wv * gr[c];
            }
          }
          dweight[wbase + ky * k + kx] += acc;
        }
      }
    }
  }
}

template <typename T>
void relu_inplace(std::vector<T>& v) {
  for (auto& x : v) x = x > T(0) ? x : T(0);
}

// Zeroes gradient entries where the forward activation was clipped.
template <typename T>
void relu_backward(const std::vector<T>& activation, std::vector<T>& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (!(activation[i] > T(0))) grad[i] = T(0);
}

}  // namespace detail

template <typename T>
class MiniUNet {
 public:
  /// Activations of one forward pass over one image.
  struct Cache {
    int h = 0, w = 0;
    std::vector<T> x, a1, a2, pooled, a3, a4, cat, a5, a6, logits;
    std::vector<std::uint8_t> pool_arg;  // argmax position 0..3 in each 2x2 window
  };

  MiniUNet() = default;
  explicit MiniUNet(int classes, std::uint64_t seed = 0) : classes_(classes) {
    if (classes < 1) throw Error("MiniUNet: class count must be positive");
    std::size_t off = 0;
    for (const auto& l : mini_unet_layers(classes)) {
      Layer layer{l, off, 0};
      off += static_cast<std::size_t>(l.out) * l.in * l.kernel * l.kernel;
      layer.b = off;
      off += l.out;
      layers_.push_back(layer);
    }
    params_.assign(off, T(0));
    Rng rng(seed);
    for (const auto& layer : layers_) {
      const double fan_in = static_cast<double>(layer.spec.in) * layer.spec.kernel * layer.spec.kernel;
      const double bound = std::sqrt(6.0 / fan_in);
      for (std::size_t i = layer.w; i < layer.b; ++i) params_[i] = static_cast<T>(rng.uniform(-bound, bound));
    }
  }

  int classes() const { return classes_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }

  std::vector<TensorInfo> tensors() const {
    std::vector<TensorInfo> out;
    for (const auto& l : layers_) {
      const auto& s = l.spec;
      out.push_back({std::string(s.name) + ".weight", {s.out, s.in, s.kernel, s.kernel}, l.w, l.b - l.w});
      out.push_back({std::string(s.name) + ".bias", {s.out}, l.b, static_cast<std::size_t>(s.out)});
    }
    return out;
  }

  template <typename U>
  MiniUNet<U> cast() const {
    MiniUNet<U> m(classes_, 0);
    auto dst = m.parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    return m;
  }

  /// Forward pass on one 3×H×W image; logits are C×H×W in cache.logits.
  void forward(const T* image, int h, int w, Cache& cache) const {
    if (h % 2 || w % 2 || h <= 0 || w <= 0) throw Error("MiniUNet: spatial dimensions must be positive and even");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const int h2 = h / 2, w2 = w / 2;
    const std::size_t plane2 = static_cast<std::size_t>(h2) * w2;
    cache.h = h;
    cache.w = w;
    cache.x.assign(image, image + 3 * plane);
    run(0, cache.x.data(), h, w, cache.a1);
    detail::relu_inplace(cache.a1);
    run(1, cache.a1.data(), h, w, cache.a2);
    detail::relu_inplace(cache.a2);

    cache.pooled.assign(kEnc1 * plane2, T(0));
    cache.pool_arg.assign(kEnc1 * plane2, 0);
    for (int ch = 0; ch < kEnc1; ++ch)
      for (int r = 0; r < h2; ++r)
        for (int c = 0; c < w2; ++c) {
          const T* base = cache.a2.data() + ch * plane + static_cast<std::size_t>(2 * r) * w + 2 * c;
          const T v[4] = {base[0], base[1], base[w], base[w + 1]};
          int best = 0;
          for (int q = 1; q < 4; ++q)
            if (v[q] > v[best]) best = q;
          cache.pooled[ch * plane2 + r * w2 + c] = v[best];
          cache.pool_arg[ch * plane2 + r * w2 + c] = static_cast<std::uint8_t>(best);
        }

    run(2, cache.pooled.data(), h2, w2, cache.a3);
    detail::relu_inplace(cache.a3);
    run(3, cache.a3.data(), h2, w2, cache.a4);
    detail::relu_inplace(cache.a4);

    cache.cat.assign((kEnc1 + kEnc2) * plane, T(0));
    std::copy(cache.a2.begin(), cache.a2.end(), cache.cat.begin());
    for (int ch = 0; ch < kEnc2; ++ch) {
      T* dst = cache.cat.data() + (kEnc1 + ch) * plane;
      const T* src = cache.a4.data() + ch * plane2;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) dst[static_cast<std::size_t>(r) * w + c] = src[(r / 2) * w2 + c / 2];
    }

    run(4, cache.cat.data(), h, w, cache.a5);
    detail::relu_inplace(cache.a5);
    run(5, cache.a5.data(), h, w, cache.a6);
    detail::relu_inplace(cache.a6);
    run(6, cache.a6.data(), h, w, cache.logits);
  }

  /// Adds parameter gradients for upstream d(loss)/d(logits) (C×H×W) into `grad`.
  void backward(const Cache& cache, const T* grad_logits, std::span<T> grad) const {
    if (grad.size() != params_.size()) throw Error("MiniUNet: gradient buffer size mismatch");
    const int h = cache.h, w = cache.w, h2 = h / 2, w2 = w / 2;
    if (cache.logits.size() != static_cast<std::size_t>(classes_) * h * w)
      throw Error("MiniUNet: cache does not match model");
    const std::size_t plane = static_cast<std::size_t>(h) * w;
    const std::size_t plane2 = static_cast<std::size_t>(h2) * w2;

    std::vector<T> g6(kDec * plane, T(0));
    back(6, cache.a6.data(), h, w, grad_logits, grad, g6.data());
    detail::relu_backward(cache.a6, g6);
    std::vector<T> g5(kDec * plane, T(0));
    back(5, cache.a5.data(), h, w, g6.data(), grad, g5.data());
    detail::relu_backward(cache.a5, g5);
    std::vector<T> gcat((kEnc1 + kEnc2) * plane, T(0));
    back(4, cache.cat.data(), h, w, g5.data(), grad, gcat.data());

    std::vector<T> g4(kEnc2 * plane2, T(0));
    for (int ch = 0; ch < kEnc2; ++ch) {
      const T* src = gcat.data() + (kEnc1 + ch) * plane;
      T* dst = g4.data() + ch * plane2;
      for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c) dst[(r / 2) * w2 + c / 2] += src[static_cast<std::size_t>(r) * w + c];
    }
    detail::relu_backward(cache.a4, g4);
    std::vector<T> g3(kEnc2 * plane2, T(0));
    back(3, cache.a3.data(), h2, w2, g4.data(), grad, g3.data());
    detail::relu_backward(cache.a3, g3);
    std::vector<T> gp(kEnc1 * plane2, T(0));
    back(2, cache.pooled.data(), h2, w2, g3.data(), grad, gp.data());

    std::vector<T> g2(gcat.begin(), gcat.begin() + kEnc1 * plane);
    for (int ch = 0; ch < kEnc1; ++ch)
      for (int r = 0; r < h2; ++r)
        for (int c = 0; c < w2; ++c) {
          const int q = cache.pool_arg[ch * plane2 + r * w2 + c];
          g2[ch * plane + static_cast<std::size_t>(2 * r + q / 2) * w + 2 * c + q % 2] +=
              gp[ch * plane2 + r * w2 + c];
        }
    detail::relu_backward(cache.a2, g2);
    std::vector<T> g1(kEnc1 * plane, T(0));
    back(1, cache.a1.data(), h, w, g2.data(), grad, g1.data());
    detail::relu_backward(cache.a1, g1);
    back(0, cache.x.data(), h, w, g1.data(), grad, nullptr);
  }

  /// Batched forward: input N×3×H×W, logits N×C×H×W.
  std::vector<T> forward_batch(std::span<const T> input, int n, int h, int w, std::vector<Cache>* caches = nullptr) const {
    const std::size_t in_stride = 3 * static_cast<std::size_t>(h) * w;
    const std::size_t out_stride = static_cast<std::size_t>(classes_) * h * w;
    if (input.size() != n * in_stride) throw Error("MiniUNet: input size mismatch");
    std::vector<Cache> local;
    auto& cs = caches ? *caches : local;
    cs.assign(n, Cache{});
    std::vector<T> logits(n * out_stride);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
      forward(input.data() + i * in_stride, h, w, cs[i]);
      std::copy(cs[i].logits.begin(), cs[i].logits.end(), logits.begin() + i * out_stride);
      if (!caches) cs[i] = Cache{};
    });
    return logits;
  }

  /// Batched backward; per-image gradients are summed in image order.
  std::vector<T> backward_batch(const std::vector<Cache>& caches, std::span<const T> grad_logits) const {
    const std::size_t n = caches.size();
    if (!n) throw Error("MiniUNet: empty batch");
    const std::size_t stride = static_cast<std::size_t>(classes_) * caches[0].h * caches[0].w;
    if (grad_logits.size() != n * stride) throw Error("MiniUNet: gradient size does not match batch");
    std::vector<std::vector<T>> per(n, std::vector<T>(params_.size(), T(0)));
    parallel_for(n, [&](std::size_t i) { backward(caches[i], grad_logits.data() + i * stride, per[i]); });
    std::vector<T> total(params_.size(), T(0));
    for (const auto& g : per)
      for (std::size_t j = 0; j < total.size(); ++j) total[j] += g[j];
    return total;
  }

 private:
  struct Layer {
    ConvSpec spec;
    std::size_t w;
    std::size_t b;
  };

  void run(int idx, const T* x, int h, int w, std::vector<T>& y) const {
    const auto& l = layers_[idx];
    y.assign(static_cast<std::size_t>(l.spec.out) * h * w, T(0));
    detail::conv_forward(x, l.spec.in, h, w, params_.data() + l.w, params_.data() + l.b, l.spec.out, l.spec.kernel,
                         y.data());
  }

  void back(int idx, const T* x, int h, int w, const T* dy, std::span<T> grad, T* dx) const {
    const auto& l = layers_[idx];
    detail::conv_backward(x, l.spec.in, h, w, params_.data() + l.w, l.spec.out, l.spec.kernel, dy,
                          grad.data() + l.w, grad.data() + l.b, dx);
  }

  int classes_ = 0;
  std::vector<Layer> layers_;
  std::vector<T> params_;
};

// ---------------------------------------------------------------------------
// Optimizer and schedule

struct AdamWConfig {
  double beta1 = 0.99;
  double beta2 = 0.9;
  double eps = 1e-8;
  double weight_decay = 0.02;
};

template <typename T>
struct AdamState {
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  explicit AdamState(std::size_t n = 0) : m(n, T(0)), v(n, T(0)) {}
};

/// theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta
template <typename T>
void adamw_step(std::span<T> params, std::span<const T> grads, AdamState<T>& state, double lr,
                const AdamWConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw Error("adamw_step: size mismatch");
  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    const double m = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    const double v = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
    state.m[i] = static_cast<T>(m);
    state.v[i] = static_cast<T>(v);
    const double theta = params[i];
    const double mhat = m / bc1, vhat = v / bc2;
    params[i] = static_cast<T>(theta - lr * mhat / (std::sqrt(vhat) + cfg.eps) - lr * cfg.weight_decay * theta);
  }
}

/// Divides the rate by three after `patience` epochs without a strict improvement.
struct PlateauSchedule {
  double lr = 5e-5;
  double factor = 1.0 / 3.0;
  int patience = 2;
  double min_lr = 1e-7;
  double best = std::numeric_limits<double>::infinity();
  int bad_epochs = 0;

  double step(double val_loss) {
    if (val_loss < best) {
      best = val_loss;
      bad_epochs = 0;
    } else if (++bad_epochs >= patience) {
      lr = std::max(lr * factor, min_lr);
      bad_epochs = 0;
    }
    return lr;
  }
};

// ---------------------------------------------------------------------------
// Checkpoint: "MUN1", u32 version, u64 config hash, u32 epoch, f64 val loss,
// u32 classes, i64 optimizer step, f64 lr, then for parameters, first and
// second moments: u32 count, per tensor u32 name length, name, u32 rank,
// u32 dims, f32 data. Little-endian throughout.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint64_t config_hash = 0;
  int epoch = 0;
  double val_loss = 0.0;
  double lr = 0.0;
  MiniUNet<float> model;
  AdamState<float> optimizer;

  bool operator==(const Checkpoint& o) const {
    const auto a = model.parameters(), b = o.model.parameters();
    return config_hash == o.config_hash && epoch == o.epoch && std::memcmp(&val_loss, &o.val_loss, 8) == 0 &&
           std::memcmp(&lr, &o.lr, 8) == 0 && model.classes() == o.model.classes() &&
           std::equal(a.begin(), a.end(), b.begin(), b.end()) && optimizer.m == o.optimizer.m &&
           optimizer.v == o.optimizer.v && optimizer.step == o.optimizer.step;
  }
};

namespace detail {
inline void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}
inline std::uint64_t get_u64(std::istream& in) {
  const std::uint64_t lo = get_u32(in);
  return lo | (static_cast<std::uint64_t>(get_u32(in)) << 32);
}
inline void put_f64(std::ostream& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }
inline double get_f64(std::istream& in) { return std::bit_cast<double>(get_u64(in)); }

inline void write_tensors(std::ostream& out, const std::vector<TensorInfo>& infos, const std::string& prefix,
                          std::span<const float> data) {
  put_u32(out, static_cast<std::uint32_t>(infos.size()));
  for (const auto& t : infos) {
    const std::string name = prefix + t.name;
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(out, static_cast<std::uint32_t>(d));
    for (std::size_t i = 0; i < t.size; ++i) put_f32(out, data[t.offset + i]);
  }
}

inline void read_tensors(std::istream& in, const std::vector<TensorInfo>& infos, const std::string& prefix,
                         std::span<float> data) {
  if (get_u32(in) != infos.size()) throw Error("checkpoint: tensor count mismatch");
  for (const auto& t : infos) {
    const auto len = get_u32(in);
    if (len > 4096) throw Error("checkpoint: corrupt tensor name");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw Error("checkpoint: truncated");
    if (name != prefix + t.name) throw Error("checkpoint: expected tensor " + prefix + t.name + ", found " + name);
    if (get_u32(in) != t.shape.size()) throw Error("checkpoint: rank mismatch for " + name);
    for (int d : t.shape)
      if (get_u32(in) != static_cast<std::uint32_t>(d)) throw Error("checkpoint: shape mismatch for " + name);
    for (std::size_t i = 0; i < t.size; ++i) data[t.offset + i] = get_f32(in);
  }
}
}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  out.write("MUN1", 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, ck.config_hash);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.epoch));
  detail::put_f64(out, ck.val_loss);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.model.classes()));
  detail::put_u64(out, static_cast<std::uint64_t>(ck.optimizer.step));
  detail::put_f64(out, ck.lr);
  const auto infos = ck.model.tensors();
  detail::write_tensors(out, infos, "", ck.model.parameters());
  const bool moments = ck.optimizer.m.size() == ck.model.parameter_count();
  detail::put_u32(out, moments ? 1 : 0);
  if (moments) {
    detail::write_tensors(out, infos, "adam.m.", ck.optimizer.m);
    detail::write_tensors(out, infos, "adam.v.", ck.optimizer.v);
  }
  if (!out) throw Error("checkpoint: write failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::memcmp(magic, "MUN1", 4) != 0) throw Error("checkpoint: bad magic");
  if (detail::get_u32(in) != kCheckpointVersion) throw Error("checkpoint: unsupported version");
  Checkpoint ck;
  ck.config_hash = detail::get_u64(in);
  ck.epoch = static_cast<int>(detail::get_u32(in));
  ck.val_loss = detail::get_f64(in);
  const auto classes = detail::get_u32(in);
  if (classes == 0 || classes > 4096) throw Error("checkpoint: implausible class count");
  const auto step = detail::get_u64(in);
  ck.lr = detail::get_f64(in);
  ck.model = MiniUNet<float>(static_cast<int>(classes), 0);
  const auto infos = ck.model.tensors();
  detail::read_tensors(in, infos, "", ck.model.parameters());
  ck.optimizer = AdamState<float>(ck.model.parameter_count());
  ck.optimizer.step = static_cast<std::int64_t>(step);
  if (detail::get_u32(in)) {
    detail::read_tensors(in, infos, "adam.m.", ck.optimizer.m);
    detail::read_tensors(in, infos, "adam.v.", ck.optimizer.v);
  }
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  write_checkpoint(out, ck);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return read_checkpoint(in);
}

}  // namespace softseg
