#include "hdseg/nn.hpp"

#include <algorithm>
#include <cmath>

namespace hdseg::nn {

int ParamStore::add(std::string name, std::vector<int> dims, float fill) {
  std::size_t n = 1;
  for (int d : dims) n *= static_cast<std::size_t>(d);
  params_.push_back(Param{std::move(name), std::move(dims), std::vector<float>(n, fill)});
  return static_cast<int>(params_.size() - 1);
}

std::size_t ParamStore::total_values() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

int ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

GradStore::GradStore(const ParamStore& params) {
  grads_.reserve(params.size());
  for (const auto& p : params.all()) grads_.emplace_back(p.value.size(), 0.0f);
}

void GradStore::zero() {
  for (auto& g : grads_) std::fill(g.begin(), g.end(), 0.0f);
}

void GradStore::add(const GradStore& other, float scale) {
  for (std::size_t i = 0; i < grads_.size(); ++i) {
    auto& dst = grads_[i];
    const auto& src = other.grads_.at(i);
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
  }
}

void GradStore::scale(float s) {
  for (auto& g : grads_)
    for (float& x : g) x *= s;
}

double GradStore::squared_norm() const {
  double s = 0.0;
  for (const auto& g : grads_)
    for (float x : g) s += static_cast<double>(x) * x;
  return s;
}

void he_normal(Param& p, int fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (float& v : p.value) v = static_cast<float>(dist(rng));
}

// ---------------------------------------------------------------------------
// Conv3d

Conv3d::Conv3d(ParamStore& store, const std::string& name, int in_channels, int out_channels, int kernel,
               int stride, int pad)
    : in_(in_channels), out_(out_channels), k_(kernel), stride_(stride), pad_(pad) {
  weight_ = store.add(name + ".weight", {out_channels, in_channels, kernel, kernel, kernel});
  bias_ = store.add(name + ".bias", {out_channels});
}

Shape3 Conv3d::output_shape(const Shape3& in) const {
  auto dim = [&](int n) { return (n + 2 * pad_ - k_) / stride_ + 1; };
  return {dim(in.d), dim(in.h), dim(in.w)};
}

namespace {

// Fast path: kernel 3, stride 1, pad 1. Rows are combined three taps at a
// time so the output row is touched once per (ci, kd, kh).
void conv3_forward(const Tensor& x, const float* weight, int out_c, Tensor& y) {
  const Shape3 s = x.shape();
  const int in_c = x.channels();
  const int W = s.w;
  for (int co = 0; co < out_c; ++co) {
    float* yc = y.channel(co);
    for (int ci = 0; ci < in_c; ++ci) {
      const float* xc = x.channel(ci);
      const float* wk = weight + (static_cast<std::size_t>(co) * in_c + ci) * 27;
      for (int z = 0; z < s.d; ++z) {
        for (int kd = 0; kd < 3; ++kd) {
          const int iz = z + kd - 1;
          if (iz < 0 || iz >= s.d) continue;
          for (int y0 = 0; y0 < s.h; ++y0) {
            float* dst = yc + (static_cast<std::size_t>(z) * s.h + y0) * W;
            for (int kh = 0; kh < 3; ++kh) {
              const int iy = y0 + kh - 1;
              if (iy < 0 || iy >= s.h) continue;
              const float* src = xc + (static_cast<std::size_t>(iz) * s.h + iy) * W;
              const float w0 = wk[kd * 9 + kh * 3 + 0];
              const float w1 = wk[kd * 9 + kh * 3 + 1];
              const float w2 = wk[kd * 9 + kh * 3 + 2];
              dst[0] += w1 * src[0] + w2 * src[1];
              for (int xx = 1; xx < W - 1; ++xx) dst[xx] += w0 * src[xx - 1] + w1 * src[xx] + w2 * src[xx + 1];
              dst[W - 1] += w0 * src[W - 2] + w1 * src[W - 1];
            }
          }
        }
      }
    }
  }
}

void conv3_backward_input(const Tensor& gy, const float* weight, int in_c, Tensor& gx) {
  const Shape3 s = gy.shape();
  const int out_c = gy.channels();
  const int W = s.w;
  for (int ci = 0; ci < in_c; ++ci) {
    float* gxc = gx.channel(ci);
    for (int co = 0; co < out_c; ++co) {
      const float* gyc = gy.channel(co);
      const float* wk = weight + (static_cast<std::size_t>(co) * in_c + ci) * 27;
      for (int iz = 0; iz < s.d; ++iz) {
        for (int kd = 0; kd < 3; ++kd) {
          const int z = iz - kd + 1;
          if (z < 0 || z >= s.d) continue;
          for (int iy = 0; iy < s.h; ++iy) {
            float* dst = gxc + (static_cast<std::size_t>(iz) * s.h + iy) * W;
            for (int kh = 0; kh < 3; ++kh) {
              const int y0 = iy - kh + 1;
              if (y0 < 0 || y0 >= s.h) continue;
              const float* src = gyc + (static_cast<std::size_t>(z) * s.h + y0) * W;
              const float w0 = wk[kd * 9 + kh * 3 + 0];
              const float w1 = wk[kd * 9 + kh * 3 + 1];
              const float w2 = wk[kd * 9 + kh * 3 + 2];
              // gx[ix] += w0*gy[ix+1] + w1*gy[ix] + w2*gy[ix-1]
              dst[0] += w1 * src[0] + w0 * src[1];
              for (int xx = 1; xx < W - 1; ++xx) dst[xx] += w2 * src[xx - 1] + w1 * src[xx] + w0 * src[xx + 1];
              dst[W - 1] += w2 * src[W - 2] + w1 * src[W - 1];
            }
          }
        }
      }
    }
  }
}

void conv3_backward_weight(const Tensor& x, const Tensor& gy, float* gw) {
  const Shape3 s = x.shape();
  const int in_c = x.channels();
  const int out_c = gy.channels();
  const int W = s.w;
  for (int co = 0; co < out_c; ++co) {
    const float* gyc = gy.channel(co);
    for (int ci = 0; ci < in_c; ++ci) {
      const float* xc = x.channel(ci);
      double acc[27] = {};
      for (int kd = 0; kd < 3; ++kd) {
        for (int kh = 0; kh < 3; ++kh) {
          double a0 = 0.0, a1 = 0.0, a2 = 0.0;
          for (int z = 0; z < s.d; ++z) {
            const int iz = z + kd - 1;
            if (iz < 0 || iz >= s.d) continue;
            for (int y0 = 0; y0 < s.h; ++y0) {
              const int iy = y0 + kh - 1;
              if (iy < 0 || iy >= s.h) continue;
              const float* g = gyc + (static_cast<std::size_t>(z) * s.h + y0) * W;
              const float* src = xc + (static_cast<std::size_t>(iz) * s.h + iy) * W;
              float r0 = 0.0f, r1 = 0.0f, r2 = 0.0f;
              for (int xx = 0; xx < W; ++xx) r1 += g[xx] * src[xx];
              for (int xx = 1; xx < W; ++xx) r0 += g[xx] * src[xx - 1];
              for (int xx = 0; xx < W - 1; ++xx) r2 += g[xx] * src[xx + 1];
              a0 += r0;
              a1 += r1;
              a2 += r2;
            }
          }
          acc[kd * 9 + kh * 3 + 0] = a0;
          acc[kd * 9 + kh * 3 + 1] = a1;
          acc[kd * 9 + kh * 3 + 2] = a2;
        }
      }
      float* dst = gw + (static_cast<std::size_t>(co) * in_c + ci) * 27;
      for (int t = 0; t < 27; ++t) dst[t] += static_cast<float>(acc[t]);
    }
  }
}

}  // namespace

Tensor Conv3d::forward(const ParamStore& p, const Tensor& x) const {
  if (x.channels() != in_) {
    throw DimensionError("conv: expected " + std::to_string(in_) + " input channels, got " +
                         std::to_string(x.channels()));
  }
  const Shape3 so = output_shape(x.shape());
  if (so.d <= 0 || so.h <= 0 || so.w <= 0) throw DimensionError("conv: input " + x.shape().str() + " too small");
  Tensor y(out_, so);
  const auto& w = p[weight_].value;
  const auto& b = p[bias_].value;
  for (int co = 0; co < out_; ++co) std::fill(y.channel(co), y.channel(co) + y.voxels(), b[co]);

  if (k_ == 3 && stride_ == 1 && pad_ == 1 && x.shape().w >= 2) {
    conv3_forward(x, w.data(), out_, y);
    return y;
  }
  const Shape3 si = x.shape();
  for (int co = 0; co < out_; ++co) {
    float* yc = y.channel(co);
    for (int ci = 0; ci < in_; ++ci) {
      const float* xc = x.channel(ci);
      for (int kd = 0; kd < k_; ++kd)
        for (int kh = 0; kh < k_; ++kh)
          for (int kw = 0; kw < k_; ++kw) {
            const float wv = w[(((static_cast<std::size_t>(co) * in_ + ci) * k_ + kd) * k_ + kh) * k_ + kw];
            for (int oz = 0; oz < so.d; ++oz) {
              const int iz = oz * stride_ + kd - pad_;
              if (iz < 0 || iz >= si.d) continue;
              for (int oy = 0; oy < so.h; ++oy) {
                const int iy = oy * stride_ + kh - pad_;
                if (iy < 0 || iy >= si.h) continue;
                float* dst = yc + (static_cast<std::size_t>(oz) * so.h + oy) * so.w;
                const float* src = xc + (static_cast<std::size_t>(iz) * si.h + iy) * si.w;
                for (int ox = 0; ox < so.w; ++ox) {
                  const int ix = ox * stride_ + kw - pad_;
                  if (ix < 0 || ix >= si.w) continue;
                  dst[ox] += wv * src[ix];
                }
              }
            }
          }
    }
  }
  return y;
}

Tensor Conv3d::backward(const ParamStore& p, const Tensor& x, const Tensor& gy, GradStore& g,
                        bool need_input_grad) const {
  const Shape3 si = x.shape();
  const Shape3 so = gy.shape();
  const auto& w = p[weight_].value;
  auto& gw = g[weight_];
  auto& gb = g[bias_];
  for (int co = 0; co < out_; ++co) {
    const float* gyc = gy.channel(co);
    double s = 0.0;
    for (std::size_t v = 0; v < gy.voxels(); ++v) s += gyc[v];
    gb[co] += static_cast<float>(s);
  }
  Tensor gx;
  if (need_input_grad) gx = Tensor(in_, si);

  if (k_ == 3 && stride_ == 1 && pad_ == 1 && si.w >= 2) {
    conv3_backward_weight(x, gy, gw.data());
    if (need_input_grad) conv3_backward_input(gy, w.data(), in_, gx);
    return gx;
  }
  for (int co = 0; co < out_; ++co) {
    const float* gyc = gy.channel(co);
    for (int ci = 0; ci < in_; ++ci) {
      const float* xc = x.channel(ci);
      float* gxc = need_input_grad ? gx.channel(ci) : nullptr;
      for (int kd = 0; kd < k_; ++kd)
        for (int kh = 0; kh < k_; ++kh)
          for (int kw = 0; kw < k_; ++kw) {
            const std::size_t widx = (((static_cast<std::size_t>(co) * in_ + ci) * k_ + kd) * k_ + kh) * k_ + kw;
            const float wv = w[widx];
            double acc = 0.0;
            for (int oz = 0; oz < so.d; ++oz) {
              const int iz = oz * stride_ + kd - pad_;
              if (iz < 0 || iz >= si.d) continue;
              for (int oy = 0; oy < so.h; ++oy) {
                const int iy = oy * stride_ + kh - pad_;
                if (iy < 0 || iy >= si.h) continue;
                const float* gr = gyc + (static_cast<std::size_t>(oz) * so.h + oy) * so.w;
                const std::size_t in_row = (static_cast<std::size_t>(iz) * si.h + iy) * si.w;
                float row = 0.0f;
                for (int ox = 0; ox < so.w; ++ox) {
                  const int ix = ox * stride_ + kw - pad_;
                  if (ix < 0 || ix >= si.w) continue;
                  row += gr[ox] * xc[in_row + ix];
                  if (gxc) gxc[in_row + ix] += wv * gr[ox];
                }
                acc += row;
              }
            }
            gw[widx] += static_cast<float>(acc);
          }
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// ConvTranspose3d

ConvTranspose3d::ConvTranspose3d(ParamStore& store, const std::string& name, int in_channels, int out_channels)
    : in_(in_channels), out_(out_channels) {
  weight_ = store.add(name + ".weight", {in_channels, out_channels, 2, 2, 2});
  bias_ = store.add(name + ".bias", {out_channels});
}

Tensor ConvTranspose3d::forward(const ParamStore& p, const Tensor& x) const {
  if (x.channels() != in_) throw DimensionError("transposed conv: input channel mismatch");
  const Shape3 si = x.shape();
  const Shape3 so{si.d * 2, si.h * 2, si.w * 2};
  Tensor y(out_, so);
  const auto& w = p[weight_].value;
  const auto& b = p[bias_].value;
  for (int co = 0; co < out_; ++co) std::fill(y.channel(co), y.channel(co) + y.voxels(), b[co]);
  for (int ci = 0; ci < in_; ++ci) {
    const float* xc = x.channel(ci);
    for (int co = 0; co < out_; ++co) {
      float* yc = y.channel(co);
      const float* wk = w.data() + (static_cast<std::size_t>(ci) * out_ + co) * 8;
      for (int z = 0; z < si.d; ++z)
        for (int a = 0; a < 2; ++a)
          for (int yy = 0; yy < si.h; ++yy)
            for (int bb = 0; bb < 2; ++bb) {
              const float* src = xc + (static_cast<std::size_t>(z) * si.h + yy) * si.w;
              float* dst = yc + (static_cast<std::size_t>(2 * z + a) * so.h + 2 * yy + bb) * so.w;
              const float w0 = wk[a * 4 + bb * 2 + 0];
              const float w1 = wk[a * 4 + bb * 2 + 1];
              for (int xx = 0; xx < si.w; ++xx) {
                dst[2 * xx] += w0 * src[xx];
                dst[2 * xx + 1] += w1 * src[xx];
              }
            }
    }
  }
  return y;
}

Tensor ConvTranspose3d::backward(const ParamStore& p, const Tensor& x, const Tensor& gy, GradStore& g) const {
  const Shape3 si = x.shape();
  const Shape3 so = gy.shape();
  const auto& w = p[weight_].value;
  auto& gw = g[weight_];
  auto& gb = g[bias_];
  for (int co = 0; co < out_; ++co) {
    double s = 0.0;
    const float* gyc = gy.channel(co);
    for (std::size_t v = 0; v < gy.voxels(); ++v) s += gyc[v];
    gb[co] += static_cast<float>(s);
  }
  Tensor gx(in_, si);
  for (int ci = 0; ci < in_; ++ci) {
    const float* xc = x.channel(ci);
    float* gxc = gx.channel(ci);
    for (int co = 0; co < out_; ++co) {
      const float* gyc = gy.channel(co);
      const std::size_t base = (static_cast<std::size_t>(ci) * out_ + co) * 8;
      double acc[8] = {};
      for (int z = 0; z < si.d; ++z)
        for (int a = 0; a < 2; ++a)
          for (int yy = 0; yy < si.h; ++yy)
            for (int bb = 0; bb < 2; ++bb) {
              const float* src = xc + (static_cast<std::size_t>(z) * si.h + yy) * si.w;
              float* gsrc = gxc + (static_cast<std::size_t>(z) * si.h + yy) * si.w;
              const float* gr = gyc + (static_cast<std::size_t>(2 * z + a) * so.h + 2 * yy + bb) * so.w;
              const float w0 = w[base + a * 4 + bb * 2 + 0];
              const float w1 = w[base + a * 4 + bb * 2 + 1];
              float r0 = 0.0f, r1 = 0.0f;
              for (int xx = 0; xx < si.w; ++xx) {
                r0 += gr[2 * xx] * src[xx];
                r1 += gr[2 * xx + 1] * src[xx];
                gsrc[xx] += w0 * gr[2 * xx] + w1 * gr[2 * xx + 1];
              }
              acc[a * 4 + bb * 2 + 0] += r0;
              acc[a * 4 + bb * 2 + 1] += r1;
            }
      for (int t = 0; t < 8; ++t) gw[base + t] += static_cast<float>(acc[t]);
    }
  }
  return gx;
}

// ---------------------------------------------------------------------------
// GroupNorm

GroupNorm::GroupNorm(ParamStore& store, const std::string& name, int channels, int groups)
    : channels_(channels), groups_(groups) {
  if (groups < 1 || channels % groups != 0) {
    throw ConfigError("group norm: " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  gamma_ = store.add(name + ".gamma", {channels}, 1.0f);
  beta_ = store.add(name + ".beta", {channels}, 0.0f);
}

Tensor GroupNorm::forward(const ParamStore& p, const Tensor& x, Cache* cache) const {
  if (x.channels() != channels_) throw DimensionError("group norm: channel mismatch");
  const int per = channels_ / groups_;
  const std::size_t n = x.voxels();
  const auto& gamma = p[gamma_].value;
  const auto& beta = p[beta_].value;
  Tensor y(channels_, x.shape());
  Tensor xhat;
  if (cache) {
    xhat = Tensor(channels_, x.shape());
    cache->inv_std.assign(groups_, 0.0);
  }
  for (int g = 0; g < groups_; ++g) {
    double s = 0.0, ss = 0.0;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const float* xc = x.channel(c);
      for (std::size_t v = 0; v < n; ++v) {
        s += xc[v];
        ss += static_cast<double>(xc[v]) * xc[v];
      }
    }
    const double count = static_cast<double>(per) * static_cast<double>(n);
    const double mean = s / count;
    const double var = std::max(0.0, ss / count - mean * mean);
    const double inv = 1.0 / std::sqrt(var + kEps);
    if (cache) cache->inv_std[g] = inv;
    for (int c = g * per; c < (g + 1) * per; ++c) {
      const float* xc = x.channel(c);
      float* yc = y.channel(c);
      const float m = static_cast<float>(mean);
      const float iv = static_cast<float>(inv);
      float* hc = cache ? xhat.channel(c) : nullptr;
      for (std::size_t v = 0; v < n; ++v) {
        const float h = (xc[v] - m) * iv;
        if (hc) hc[v] = h;
        yc[v] = h * gamma[c] + beta[c];
      }
    }
  }
  if (cache) cache->normalized = std::move(xhat);
  return y;
}

Tensor GroupNorm::backward(const ParamStore& p, const Cache& cache, const Tensor& gy, GradStore& g) const {
  const int per = channels_ / groups_;
  const std::size_t n = gy.voxels();
  const auto& gamma = p[gamma_].value;
  auto& g_gamma = g[gamma_];
  auto& g_beta = g[beta_];
  Tensor gx(channels_, gy.shape());
  for (int grp = 0; grp < groups_; ++grp) {
    double sum_d = 0.0, sum_dh = 0.0;
    for (int c = grp * per; c < (grp + 1) * per; ++c) {
      const float* gc = gy.channel(c);
      const float* hc = cache.normalized.channel(c);
      double sg = 0.0, sgh = 0.0;
      for (std::size_t v = 0; v < n; ++v) {
        sg += gc[v];
        sgh += static_cast<double>(gc[v]) * hc[v];
      }
      g_beta[c] += static_cast<float>(sg);
      g_gamma[c] += static_cast<float>(sgh);
      sum_d += gamma[c] * sg;
      sum_dh += gamma[c] * sgh;
    }
    const double count = static_cast<double>(per) * static_cast<double>(n);
    const float inv = static_cast<float>(cache.inv_std[grp]);
    const float mean_d = static_cast<float>(sum_d / count);
    const float mean_dh = static_cast<float>(sum_dh / count);
    for (int c = grp * per; c < (grp + 1) * per; ++c) {
      const float* gc = gy.channel(c);
      const float* hc = cache.normalized.channel(c);
      float* out = gx.channel(c);
      const float gm = gamma[c];
      for (std::size_t v = 0; v < n; ++v) out[v] = inv * (gm * gc[v] - mean_d - hc[v] * mean_dh);
    }
  }
  return gx;
}

void relu_inplace(Tensor& x) {
  for (float& v : x.values()) v = v < 0.0f ? 0.0f : v;  // NaN passes through
}

void relu_backward_inplace(const Tensor& activated, Tensor& grad) {
  const auto& a = activated.values();
  auto& g = grad.values();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = a[i] > 0.0f ? g[i] : 0.0f;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_layout(src)) throw DimensionError("add: layout mismatch");
  auto& d = dst.values();
  const auto& s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

// ---------------------------------------------------------------------------
// ResBlock

ResBlock::ResBlock(ParamStore& store, const std::string& name, int channels, int groups)
    : n1_(store, name + ".norm1", channels, groups),
      c1_(store, name + ".conv1", channels, channels, 3, 1, 1),
      n2_(store, name + ".norm2", channels, groups),
      c2_(store, name + ".conv2", channels, channels, 3, 1, 1) {}

Tensor ResBlock::forward(const ParamStore& p, const Tensor& x, Cache* cache) const {
  Cache local;
  Cache& c = cache ? *cache : local;
  Tensor a1 = n1_.forward(p, x, cache ? &c.n1 : nullptr);
  relu_inplace(a1);
  Tensor h1 = c1_.forward(p, a1);
  Tensor a2 = n2_.forward(p, h1, cache ? &c.n2 : nullptr);
  relu_inplace(a2);
  Tensor y = c2_.forward(p, a2);
  add_inplace(y, x);
  if (cache) {
    c.a1 = std::move(a1);
    c.a2 = std::move(a2);
  }
  return y;
}

Tensor ResBlock::backward(const ParamStore& p, const Cache& cache, const Tensor& gy, GradStore& g) const {
  Tensor g_a2 = c2_.backward(p, cache.a2, gy, g);
  relu_backward_inplace(cache.a2, g_a2);
  Tensor g_h1 = n2_.backward(p, cache.n2, g_a2, g);
  Tensor g_a1 = c1_.backward(p, cache.a1, g_h1, g);
  relu_backward_inplace(cache.a1, g_a1);
  Tensor gx = n1_.backward(p, cache.n1, g_a1, g);
  add_inplace(gx, gy);
  return gx;
}

}  // namespace hdseg::nn
