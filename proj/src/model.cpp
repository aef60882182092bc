#include "bat/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "bat/rng.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint format assumes a little-endian host");

namespace bat::model {

namespace {

constexpr double kLnEps = 1e-6;
constexpr int kStemOut[4] = {8, 16, 32, -1};  // -1: cfg.channels
constexpr int kStemIn[4] = {3, 8, 16, 32};

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * 0.7071067811865475)); }

double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * 0.7071067811865475)) +
         x * std::exp(-0.5 * x * x) * 0.3989422804014327;  // 1/sqrt(2*pi)
}

// y = x w + b for x:(L,A), w:(A,B), b:(B)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const std::size_t L = x.dim(0), A = x.dim(1), B = w.dim(1);
  Tensor y{L, B};
  for (std::size_t i = 0; i < L; ++i) {
    for (std::size_t j = 0; j < B; ++j) {
      double acc = b.v[j];
      for (std::size_t a = 0; a < A; ++a) acc += x(i, a) * w(a, j);
      y(i, j) = acc;
    }
  }
  return y;
}

void linear_backward(const Tensor& x, const Tensor& w, const Tensor& dy, Tensor& dx, Tensor& dw, Tensor& db) {
  const std::size_t L = x.dim(0), A = x.dim(1), B = w.dim(1);
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t a = 0; a < A; ++a) {
      double acc = 0.0;
      for (std::size_t j = 0; j < B; ++j) acc += dy(i, j) * w(a, j);
      dx(i, a) += acc;
    }
  for (std::size_t a = 0; a < A; ++a)
    for (std::size_t j = 0; j < B; ++j) {
      double acc = 0.0;
      for (std::size_t i = 0; i < L; ++i) acc += x(i, a) * dy(i, j);
      dw(a, j) += acc;
    }
  for (std::size_t j = 0; j < B; ++j) {
    double acc = 0.0;
    for (std::size_t i = 0; i < L; ++i) acc += dy(i, j);
    db.v[j] += acc;
  }
}

// Per-row layer normalization without learnable affine terms.
Tensor layernorm(const Tensor& x, std::vector<double>& inv_std) {
  const std::size_t L = x.dim(0), C = x.dim(1);
  Tensor y{L, C};
  inv_std.assign(L, 0.0);
  for (std::size_t i = 0; i < L; ++i) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += x(i, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      const double d = x(i, c) - mu;
      var += d * d;
    }
    var /= static_cast<double>(C);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    inv_std[i] = inv;
    for (std::size_t c = 0; c < C; ++c) y(i, c) = (x(i, c) - mu) * inv;
  }
  return y;
}

// dx from dy given the normalized output y and per-row inverse std.
Tensor layernorm_backward(const Tensor& y, const std::vector<double>& inv_std, const Tensor& dy) {
  const std::size_t L = y.dim(0), C = y.dim(1);
  Tensor dx{L, C};
  for (std::size_t i = 0; i < L; ++i) {
    double mean_dy = 0.0, mean_dyy = 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      mean_dy += dy(i, c);
      mean_dyy += dy(i, c) * y(i, c);
    }
    mean_dy /= static_cast<double>(C);
    mean_dyy /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c)
      dx(i, c) = inv_std[i] * (dy(i, c) - mean_dy - y(i, c) * mean_dyy);
  }
  return dx;
}

// Stride-2 3x3 convolution with padding 1 followed by tanh.
Tensor stem_block(const Tensor& in, const Tensor& w, const Tensor& b) {
  const std::size_t ih = in.dim(0), iw = in.dim(1), ic = in.dim(2);
  const std::size_t oc = w.dim(0);
  const std::size_t oh = ih / 2, ow = iw / 2;
  Tensor out{oh, ow, oc};
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < oc; ++o) {
        double acc = b.v[o];
        for (std::size_t c = 0; c < ic; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int y = static_cast<int>(2 * oy) + ky - 1;
              const int x = static_cast<int>(2 * ox) + kx - 1;
              if (y < 0 || y >= static_cast<int>(ih) || x < 0 || x >= static_cast<int>(iw)) continue;
              acc += w(o, c, ky, kx) * in(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
            }
        out(oy, ox, o) = std::tanh(acc);
      }
  return out;
}

void stem_block_backward(const Tensor& in, const Tensor& w, const Tensor& out, const Tensor& dout, Tensor& din,
                         Tensor& dw, Tensor& db) {
  const std::size_t ih = in.dim(0), iw = in.dim(1), ic = in.dim(2);
  const std::size_t oc = w.dim(0);
  const std::size_t oh = out.dim(0), ow = out.dim(1);
  for (std::size_t oy = 0; oy < oh; ++oy)
    for (std::size_t ox = 0; ox < ow; ++ox)
      for (std::size_t o = 0; o < oc; ++o) {
        const double y = out(oy, ox, o);
        const double dpre = dout(oy, ox, o) * (1.0 - y * y);
        db.v[o] += dpre;
        for (std::size_t c = 0; c < ic; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = static_cast<int>(2 * oy) + ky - 1;
              const int xx = static_cast<int>(2 * ox) + kx - 1;
              if (yy < 0 || yy >= static_cast<int>(ih) || xx < 0 || xx >= static_cast<int>(iw)) continue;
              dw(o, c, ky, kx) += dpre * in(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c);
              din(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), c) += dpre * w(o, c, ky, kx);
            }
      }
}

// 3x3 dilated convolution, zero padding = rate, stride 1, no nonlinearity.
void dilated_conv(const Tensor& grid, const Tensor& w, const Tensor& b, int rate, Tensor& out, std::size_t oc_base) {
  const std::size_t gh = grid.dim(0), gw = grid.dim(1), ic = grid.dim(2);
  const std::size_t oc = w.dim(0);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t o = 0; o < oc; ++o) {
        double acc = b.v[o];
        for (std::size_t c = 0; c < ic; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int y = static_cast<int>(gy) + (ky - 1) * rate;
              const int x = static_cast<int>(gx) + (kx - 1) * rate;
              if (y < 0 || y >= static_cast<int>(gh) || x < 0 || x >= static_cast<int>(gw)) continue;
              acc += w(o, c, ky, kx) * grid(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
            }
        out(gy, gx, oc_base + o) = acc;
      }
}

void dilated_conv_backward(const Tensor& grid, const Tensor& w, int rate, const Tensor& dout, std::size_t oc_base,
                           Tensor& dgrid, Tensor& dw, Tensor& db) {
  const std::size_t gh = grid.dim(0), gw = grid.dim(1), ic = grid.dim(2);
  const std::size_t oc = w.dim(0);
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t o = 0; o < oc; ++o) {
        const double d = dout(gy, gx, oc_base + o);
        db.v[o] += d;
        for (std::size_t c = 0; c < ic; ++c)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              const int y = static_cast<int>(gy) + (ky - 1) * rate;
              const int x = static_cast<int>(gx) + (kx - 1) * rate;
              if (y < 0 || y >= static_cast<int>(gh) || x < 0 || x >= static_cast<int>(gw)) continue;
              dw(o, c, ky, kx) += d * grid(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c);
              dgrid(static_cast<std::size_t>(y), static_cast<std::size_t>(x), c) += d * w(o, c, ky, kx);
            }
      }
}

// Source coordinate and blend weights for one upsampled axis position,
// half-pixel-center convention with edge clamping.
struct Lerp {
  std::size_t i0, i1;
  double f;  // weight of i1
};

Lerp lerp_at(std::size_t out_i, int factor, std::size_t in_n) {
  const double s = (static_cast<double>(out_i) + 0.5) / factor - 0.5;
  double fl = std::floor(s);
  long i0 = static_cast<long>(fl);
  double f = s - fl;
  long i1 = i0 + 1;
  if (i0 < 0) i0 = 0;
  if (i1 < 0) i1 = 0;
  const long last = static_cast<long>(in_n) - 1;
  if (i0 > last) i0 = last;
  if (i1 > last) i1 = last;
  return {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), f};
}

Tensor bilinear_up(const Tensor& g, int factor) {
  const std::size_t gh = g.dim(0), gw = g.dim(1);
  Tensor out{gh * factor, gw * factor};
  for (std::size_t oy = 0; oy < out.dim(0); ++oy) {
    const Lerp ly = lerp_at(oy, factor, gh);
    for (std::size_t ox = 0; ox < out.dim(1); ++ox) {
      const Lerp lx = lerp_at(ox, factor, gw);
      out(oy, ox) = (1.0 - ly.f) * ((1.0 - lx.f) * g(ly.i0, lx.i0) + lx.f * g(ly.i0, lx.i1)) +
                    ly.f * ((1.0 - lx.f) * g(ly.i1, lx.i0) + lx.f * g(ly.i1, lx.i1));
    }
  }
  return out;
}

void bilinear_up_backward(const Tensor& dout, int factor, Tensor& dg) {
  const std::size_t gh = dg.dim(0), gw = dg.dim(1);
  for (std::size_t oy = 0; oy < dout.dim(0); ++oy) {
    const Lerp ly = lerp_at(oy, factor, gh);
    for (std::size_t ox = 0; ox < dout.dim(1); ++ox) {
      const Lerp lx = lerp_at(ox, factor, gw);
      const double d = dout(oy, ox);
      dg(ly.i0, lx.i0) += d * (1.0 - ly.f) * (1.0 - lx.f);
      dg(ly.i0, lx.i1) += d * (1.0 - ly.f) * lx.f;
      dg(ly.i1, lx.i0) += d * ly.f * (1.0 - lx.f);
      dg(ly.i1, lx.i1) += d * ly.f * lx.f;
    }
  }
}

// Attention core on an already normalized sequence; fills trace fields.
void attention_forward(const Tensor& xn, const LayerParams& lp, const ModelConfig& cfg, LayerTrace& t) {
  const std::size_t L = xn.dim(0);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  t.q = linear(xn, lp.wq, lp.bq);
  t.k = linear(xn, lp.wk, lp.bk);
  t.vv = linear(xn, lp.wv, lp.bv);
  t.concat = Tensor{L, static_cast<std::size_t>(cfg.channels)};
  t.probs.assign(static_cast<std::size_t>(cfg.heads), Tensor{});
  for (int h = 0; h < cfg.heads; ++h) {
    const std::size_t off = h * hd;
    Tensor& p = t.probs[static_cast<std::size_t>(h)];
    p = Tensor{L, L};
    for (std::size_t i = 0; i < L; ++i) {
      double row_max = -1e300;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < hd; ++d) s += t.q(i, off + d) * t.k(j, off + d);
        s *= scale;
        p(i, j) = s;
        if (s > row_max) row_max = s;
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        p(i, j) = std::exp(p(i, j) - row_max);
        denom += p(i, j);
      }
      for (std::size_t j = 0; j < L; ++j) p(i, j) /= denom;
    }
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += p(i, j) * t.vv(j, off + d);
        t.concat(i, off + d) = acc;
      }
  }
  t.attn_out = linear(t.concat, lp.wo, lp.bo);
}

void attention_backward(const Tensor& xn, const LayerParams& lp, const ModelConfig& cfg, const LayerTrace& t,
                        const Tensor& d_attn_out, Tensor& dxn, LayerParams& g) {
  const std::size_t L = xn.dim(0);
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor dconcat{L, C};
  linear_backward(t.concat, lp.wo, d_attn_out, dconcat, g.wo, g.bo);

  Tensor dq{L, C}, dk{L, C}, dv{L, C};
  for (int h = 0; h < cfg.heads; ++h) {
    const std::size_t off = h * hd;
    const Tensor& p = t.probs[static_cast<std::size_t>(h)];
    Tensor dp{L, L};
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < hd; ++d) acc += dconcat(i, off + d) * t.vv(j, off + d);
        dp(i, j) = acc;
      }
    for (std::size_t j = 0; j < L; ++j)
      for (std::size_t d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (std::size_t i = 0; i < L; ++i) acc += p(i, j) * dconcat(i, off + d);
        dv(j, off + d) += acc;
      }
    // softmax rows: ds = p * (dp - sum_j dp*p)
    for (std::size_t i = 0; i < L; ++i) {
      double dot = 0.0;
      for (std::size_t j = 0; j < L; ++j) dot += dp(i, j) * p(i, j);
      for (std::size_t j = 0; j < L; ++j) {
        const double ds = p(i, j) * (dp(i, j) - dot) * scale;
        for (std::size_t d = 0; d < hd; ++d) {
          dq(i, off + d) += ds * t.k(j, off + d);
          dk(j, off + d) += ds * t.q(i, off + d);
        }
      }
    }
  }
  linear_backward(xn, lp.wq, dq, dxn, g.wq, g.bq);
  linear_backward(xn, lp.wk, dk, dxn, g.wk, g.bk);
  linear_backward(xn, lp.wv, dv, dxn, g.wv, g.bv);
}

void encoder_layer_forward(const Tensor& z_prev, const LayerParams& lp, const ModelConfig& cfg, LayerTrace& t) {
  const std::size_t L = z_prev.dim(0), C = z_prev.dim(1);
  t.z_in = z_prev;
  t.xn = layernorm(z_prev, t.inv_std1);
  attention_forward(t.xn, lp, cfg, t);
  t.an = layernorm(t.attn_out, t.inv_std2);
  t.h_pre = linear(t.an, lp.mlp_w1, lp.mlp_b1);
  t.h_act = Tensor::zeros_like(t.h_pre);
  for (std::size_t i = 0; i < t.h_pre.size(); ++i) t.h_act.v[i] = gelu(t.h_pre.v[i]);
  Tensor mlp_out = linear(t.h_act, lp.mlp_w2, lp.mlp_b2);
  t.v = Tensor{L, C};
  for (std::size_t i = 0; i < t.v.size(); ++i) t.v.v[i] = t.attn_out.v[i] + mlp_out.v[i];
  if (cfg.bag) {
    t.m = Tensor{L};
    for (std::size_t i = 0; i < L; ++i) {
      double s = lp.bag_b.v[0];
      for (std::size_t c = 0; c < C; ++c) s += t.v(i, c) * lp.bag_w.v[c];
      t.m.v[i] = sigmoid(s);
    }
    t.z_out = Tensor{L, C};
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t c = 0; c < C; ++c) t.z_out(i, c) = t.v(i, c) + t.v(i, c) * t.m.v[i];
  } else {
    t.m = Tensor{};
    t.z_out = t.v;
  }
}

// d_m is the loss gradient on this layer's map (may be empty); returns dz_in.
Tensor encoder_layer_backward(const LayerParams& lp, const ModelConfig& cfg, const LayerTrace& t,
                              const Tensor& dz_out, const Tensor& d_m, LayerParams& g) {
  const std::size_t L = t.z_in.dim(0), C = t.z_in.dim(1);
  Tensor dv{L, C};
  if (cfg.bag) {
    for (std::size_t i = 0; i < L; ++i) {
      double dm = d_m.size() ? d_m.v[i] : 0.0;
      for (std::size_t c = 0; c < C; ++c) {
        dm += dz_out(i, c) * t.v(i, c);
        dv(i, c) = dz_out(i, c) * (1.0 + t.m.v[i]);
      }
      const double ds = dm * t.m.v[i] * (1.0 - t.m.v[i]);
      g.bag_b.v[0] += ds;
      for (std::size_t c = 0; c < C; ++c) {
        g.bag_w.v[c] += ds * t.v(i, c);
        dv(i, c) += ds * lp.bag_w.v[c];
      }
    }
  } else {
    dv = dz_out;
  }
  // v = attn_out + mlp(an)
  Tensor dh_act{L, t.h_act.dim(1)};
  Tensor dan{L, C};
  {
    Tensor dw2_in{L, t.h_act.dim(1)};
    linear_backward(t.h_act, lp.mlp_w2, dv, dw2_in, g.mlp_w2, g.mlp_b2);
    Tensor dh_pre = dw2_in;
    for (std::size_t i = 0; i < dh_pre.size(); ++i) dh_pre.v[i] *= gelu_grad(t.h_pre.v[i]);
    linear_backward(t.an, lp.mlp_w1, dh_pre, dan, g.mlp_w1, g.mlp_b1);
  }
  Tensor d_attn_out = layernorm_backward(t.an, t.inv_std2, dan);
  for (std::size_t i = 0; i < d_attn_out.size(); ++i) d_attn_out.v[i] += dv.v[i];

  Tensor dxn{L, C};
  attention_backward(t.xn, lp, cfg, t, d_attn_out, dxn, g);
  return layernorm_backward(t.xn, t.inv_std1, dxn);
}

void query_bag_forward(const Tensor& z, const Tensor& qe, const ModelConfig& cfg, Tensor& m, Tensor& out) {
  const std::size_t L = z.dim(0), C = z.dim(1);
  if (!cfg.bag) {
    m = Tensor{};
    out = z;
    return;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  m = Tensor{L};
  out = Tensor{L, C};
  for (std::size_t i = 0; i < L; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += z(i, c) * qe.v[c];
    m.v[i] = sigmoid(s * scale);
    for (std::size_t c = 0; c < C; ++c) out(i, c) = z(i, c) + z(i, c) * m.v[i];
  }
}

Tensor query_bag_backward(const Tensor& z, const Tensor& qe, const ModelConfig& cfg, const Tensor& m,
                          const Tensor& dout, const Tensor& d_m, Tensor& dqe) {
  const std::size_t L = z.dim(0), C = z.dim(1);
  if (!cfg.bag) return dout;
  const double scale = 1.0 / std::sqrt(static_cast<double>(C));
  Tensor dz{L, C};
  for (std::size_t i = 0; i < L; ++i) {
    double dm = d_m.size() ? d_m.v[i] : 0.0;
    for (std::size_t c = 0; c < C; ++c) {
      dm += dout(i, c) * z(i, c);
      dz(i, c) = dout(i, c) * (1.0 + m.v[i]);
    }
    const double ds = dm * m.v[i] * (1.0 - m.v[i]) * scale;
    for (std::size_t c = 0; c < C; ++c) {
      dz(i, c) += ds * qe.v[c];
      dqe.v[c] += ds * z(i, c);
    }
  }
  return dz;
}

Tensor grid_from_sequence(const Tensor& z, const ModelConfig& cfg) {
  const std::size_t gh = static_cast<std::size_t>(cfg.grid_rows());
  const std::size_t gw = static_cast<std::size_t>(cfg.grid_cols());
  const std::size_t C = z.dim(1);
  Tensor grid{gh, gw, C};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < C; ++c) grid(gy, gx, c) = z(gy * gw + gx, c);
  return grid;
}

void atrous_forward(const Tensor& z, const ParameterSet& p, const ModelConfig& cfg, ForwardTrace* trace, Tensor& seg) {
  const std::size_t gh = static_cast<std::size_t>(cfg.grid_rows());
  const std::size_t gw = static_cast<std::size_t>(cfg.grid_cols());
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  Tensor grid = grid_from_sequence(z, cfg);
  Tensor concat{gh, gw, 3 * C};
  dilated_conv(grid, p.at_w1, p.at_b1, 1, concat, 0);
  dilated_conv(grid, p.at_w3, p.at_b3, 3, concat, C);
  dilated_conv(grid, p.at_w6, p.at_b6, 6, concat, 2 * C);
  Tensor logits{gh, gw};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      double acc = p.at_proj_b.v[0];
      for (std::size_t c = 0; c < 3 * C; ++c) acc += p.at_proj_w.v[c] * concat(gy, gx, c);
      logits(gy, gx) = acc;
    }
  Tensor up = bilinear_up(logits, cfg.patch_side);
  seg = Tensor::zeros_like(up);
  for (std::size_t i = 0; i < up.size(); ++i) seg.v[i] = sigmoid(up.v[i]);
  if (trace) {
    trace->concat3 = std::move(concat);
    trace->logits = std::move(logits);
    trace->up = std::move(up);
    trace->seg = seg;
  }
}

void check_finite(const ParameterSet& grads) {
  std::string bad;
  grads.for_each([&](const std::string& name, const Tensor& t) {
    if (!bad.empty()) return;
    for (double x : t.v)
      if (!std::isfinite(x)) {
        bad = name;
        return;
      }
  });
  if (!bad.empty()) throw std::runtime_error("non-finite gradient in parameter '" + bad + "'");
}

}  // namespace

void ModelConfig::validate() const {
  if (patch_side != 16) throw std::invalid_argument("patch_side is fixed at 16");
  if (image_side <= 0 || image_side % patch_side != 0)
    throw std::invalid_argument("image_side must be a positive multiple of 16");
  if (layers < 1) throw std::invalid_argument("layers must be >= 1");
  if (heads < 1 || channels % heads != 0) throw std::invalid_argument("channels must be divisible by heads");
  if (mlp_hidden < 1) throw std::invalid_argument("mlp_hidden must be >= 1");
}

void ParameterSet::for_each(const std::function<void(const std::string&, Tensor&)>& fn) {
  for (int i = 0; i < 4; ++i) {
    fn("stem" + std::to_string(i) + ".w", stem_w[static_cast<std::size_t>(i)]);
    fn("stem" + std::to_string(i) + ".b", stem_b[static_cast<std::size_t>(i)]);
  }
  fn("pos", pos);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    auto& l = layers[i];
    fn(p + "wq", l.wq);
    fn(p + "bq", l.bq);
    fn(p + "wk", l.wk);
    fn(p + "bk", l.bk);
    fn(p + "wv", l.wv);
    fn(p + "bv", l.bv);
    fn(p + "wo", l.wo);
    fn(p + "bo", l.bo);
    fn(p + "mlp_w1", l.mlp_w1);
    fn(p + "mlp_b1", l.mlp_b1);
    fn(p + "mlp_w2", l.mlp_w2);
    fn(p + "mlp_b2", l.mlp_b2);
    fn(p + "bag_w", l.bag_w);
    fn(p + "bag_b", l.bag_b);
  }
  fn("query_embedding", query_embedding);
  fn("atrous.w1", at_w1);
  fn("atrous.b1", at_b1);
  fn("atrous.w3", at_w3);
  fn("atrous.b3", at_b3);
  fn("atrous.w6", at_w6);
  fn("atrous.b6", at_b6);
  fn("atrous.proj_w", at_proj_w);
  fn("atrous.proj_b", at_proj_b);
}

void ParameterSet::for_each(const std::function<void(const std::string&, const Tensor&)>& fn) const {
  const_cast<ParameterSet*>(this)->for_each(
      [&](const std::string& name, Tensor& t) { fn(name, const_cast<const Tensor&>(t)); });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for_each([&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

ParameterSet zero_params(const ModelConfig& cfg) {
  cfg.validate();
  ParameterSet p;
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  const std::size_t L = static_cast<std::size_t>(cfg.seq_len());
  const std::size_t H = static_cast<std::size_t>(cfg.mlp_hidden);
  for (int i = 0; i < 4; ++i) {
    const std::size_t oc = kStemOut[i] < 0 ? C : static_cast<std::size_t>(kStemOut[i]);
    const std::size_t ic = static_cast<std::size_t>(kStemIn[i]);
    p.stem_w[static_cast<std::size_t>(i)] = Tensor{oc, ic, 3, 3};
    p.stem_b[static_cast<std::size_t>(i)] = Tensor{oc};
  }
  p.pos = Tensor{L, C};
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& l : p.layers) {
    l.wq = Tensor{C, C};
    l.bq = Tensor{C};
    l.wk = Tensor{C, C};
    l.bk = Tensor{C};
    l.wv = Tensor{C, C};
    l.bv = Tensor{C};
    l.wo = Tensor{C, C};
    l.bo = Tensor{C};
    l.mlp_w1 = Tensor{C, H};
    l.mlp_b1 = Tensor{H};
    l.mlp_w2 = Tensor{H, C};
    l.mlp_b2 = Tensor{C};
    l.bag_w = Tensor{C};
    l.bag_b = Tensor{1};
  }
  p.query_embedding = Tensor{C};
  p.at_w1 = Tensor{C, C, 3, 3};
  p.at_b1 = Tensor{C};
  p.at_w3 = Tensor{C, C, 3, 3};
  p.at_b3 = Tensor{C};
  p.at_w6 = Tensor{C, C, 3, 3};
  p.at_b6 = Tensor{C};
  p.at_proj_w = Tensor{3 * C};
  p.at_proj_b = Tensor{1};
  return p;
}

namespace {
bool is_bias_name(const std::string& name) {
  const std::string last = name.substr(name.find_last_of('.') + 1);
  if (last == "b" || last == "bq" || last == "bk" || last == "bv" || last == "bo") return true;
  if (last == "b1" || last == "b3" || last == "b6") return true;
  return last.find("_b") != std::string::npos;  // mlp_b1, mlp_b2, bag_b, proj_b
}
}  // namespace

ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  ParameterSet p = zero_params(cfg);
  Rng rng(seed);
  p.for_each([&](const std::string& name, Tensor& t) {
    // biases stay zero; weights, pos and the query embedding draw N(0, 0.02^2)
    if (is_bias_name(name)) return;
    for (double& x : t.v) x = 0.02 * rng.normal();
  });
  return p;
}

Tensor conv_stem(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg) {
  if (image.dims.size() != 3 || image.dim(0) != static_cast<std::size_t>(cfg.image_side) ||
      image.dim(1) != static_cast<std::size_t>(cfg.image_side) || image.dim(2) != 3)
    throw std::invalid_argument("conv_stem: image shape does not match config");
  Tensor x = image;
  for (int i = 0; i < 4; ++i)
    x = stem_block(x, params.stem_w[static_cast<std::size_t>(i)], params.stem_b[static_cast<std::size_t>(i)]);
  return x;
}

Tensor sequentialize(const Tensor& feat, const Tensor& pos) {
  const std::size_t gh = feat.dim(0), gw = feat.dim(1), C = feat.dim(2);
  if (pos.dim(0) != gh * gw || pos.dim(1) != C)
    throw std::invalid_argument("sequentialize: positional embedding shape mismatch");
  Tensor z{gh * gw, C};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < C; ++c) z(gy * gw + gx, c) = feat(gy, gx, c) + pos(gy * gw + gx, c);
  return z;
}

Tensor msa(const Tensor& z, const LayerParams& lp, const ModelConfig& cfg) {
  LayerTrace t;
  t.xn = layernorm(z, t.inv_std1);
  attention_forward(t.xn, lp, cfg, t);
  return t.attn_out;
}

std::pair<Tensor, Tensor> encoder_layer(const Tensor& z_prev, const LayerParams& lp, const ModelConfig& cfg) {
  LayerTrace t;
  encoder_layer_forward(z_prev, lp, cfg, t);
  return {t.z_out, t.m};
}

std::pair<Tensor, Tensor> query_bag(const Tensor& z, const Tensor& q, const ModelConfig& cfg) {
  Tensor m, out;
  query_bag_forward(z, q, cfg, m, out);
  return {out, m};
}

Tensor atrous_head(const Tensor& z, const ParameterSet& params, const ModelConfig& cfg) {
  Tensor seg;
  atrous_forward(z, params, cfg, nullptr, seg);
  return seg;
}

ForwardResult forward(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg) {
  ForwardTrace trace;
  return forward(image, params, cfg, trace);
}

ForwardResult forward(const Tensor& image, const ParameterSet& params, const ModelConfig& cfg, ForwardTrace& trace) {
  cfg.validate();
  trace.image = image;
  Tensor x = image;
  for (int i = 0; i < 4; ++i) {
    x = stem_block(x, params.stem_w[static_cast<std::size_t>(i)], params.stem_b[static_cast<std::size_t>(i)]);
    trace.stem_out[static_cast<std::size_t>(i)] = x;
  }
  trace.z0 = sequentialize(x, params.pos);

  ForwardResult res;
  trace.layers.assign(static_cast<std::size_t>(cfg.layers), LayerTrace{});
  const Tensor* z = &trace.z0;
  for (int i = 0; i < cfg.layers; ++i) {
    LayerTrace& t = trace.layers[static_cast<std::size_t>(i)];
    encoder_layer_forward(*z, params.layers[static_cast<std::size_t>(i)], cfg, t);
    if (cfg.bag) res.maps.push_back(t.m);
    z = &t.z_out;
  }
  query_bag_forward(*z, params.query_embedding, cfg, trace.qbag_m, trace.qbag_out);
  if (cfg.bag) res.maps.push_back(trace.qbag_m);

  atrous_forward(trace.qbag_out, params, cfg, &trace, res.seg);
  for (double v : res.seg.v)
    if (!std::isfinite(v)) throw std::runtime_error("non-finite value in forward output");
  return res;
}

void backward(const ForwardTrace& trace, const ParameterSet& params, const ModelConfig& cfg, const Tensor& d_seg,
              const std::vector<Tensor>& d_maps, ParameterSet& grads) {
  const std::size_t expected = cfg.bag ? static_cast<std::size_t>(cfg.layers) + 1 : 0;
  if (d_maps.size() != expected) throw std::invalid_argument("backward: wrong number of map gradients");
  const std::size_t gh = static_cast<std::size_t>(cfg.grid_rows());
  const std::size_t gw = static_cast<std::size_t>(cfg.grid_cols());
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  const std::size_t L = static_cast<std::size_t>(cfg.seq_len());

  // sigmoid + bilinear upsample
  Tensor dup = Tensor::zeros_like(trace.up);
  for (std::size_t i = 0; i < dup.size(); ++i) {
    const double s = trace.seg.v[i];
    dup.v[i] = d_seg.v[i] * s * (1.0 - s);
  }
  Tensor dlogits{gh, gw};
  bilinear_up_backward(dup, cfg.patch_side, dlogits);

  // 1x1 projection over the concatenated branches
  Tensor dconcat{gh, gw, 3 * C};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx) {
      const double d = dlogits(gy, gx);
      grads.at_proj_b.v[0] += d;
      for (std::size_t c = 0; c < 3 * C; ++c) {
        grads.at_proj_w.v[c] += d * trace.concat3(gy, gx, c);
        dconcat(gy, gx, c) = d * params.at_proj_w.v[c];
      }
    }

  Tensor grid = grid_from_sequence(trace.qbag_out, cfg);
  Tensor dgrid{gh, gw, C};
  dilated_conv_backward(grid, params.at_w1, 1, dconcat, 0, dgrid, grads.at_w1, grads.at_b1);
  dilated_conv_backward(grid, params.at_w3, 3, dconcat, C, dgrid, grads.at_w3, grads.at_b3);
  dilated_conv_backward(grid, params.at_w6, 6, dconcat, 2 * C, dgrid, grads.at_w6, grads.at_b6);

  Tensor dz{L, C};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < C; ++c) dz(gy * gw + gx, c) = dgrid(gy, gx, c);

  const Tensor& z_last = trace.layers.back().z_out;
  dz = query_bag_backward(z_last, params.query_embedding, cfg, trace.qbag_m, dz,
                          cfg.bag ? d_maps.back() : Tensor{}, grads.query_embedding);

  for (int i = cfg.layers - 1; i >= 0; --i) {
    const LayerTrace& t = trace.layers[static_cast<std::size_t>(i)];
    dz = encoder_layer_backward(params.layers[static_cast<std::size_t>(i)], cfg, t, dz,
                                cfg.bag ? d_maps[static_cast<std::size_t>(i)] : Tensor{},
                                grads.layers[static_cast<std::size_t>(i)]);
  }

  // positional embedding and stem
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t c = 0; c < C; ++c) grads.pos(i, c) += dz(i, c);
  Tensor dfeat{gh, gw, C};
  for (std::size_t gy = 0; gy < gh; ++gy)
    for (std::size_t gx = 0; gx < gw; ++gx)
      for (std::size_t c = 0; c < C; ++c) dfeat(gy, gx, c) = dz(gy * gw + gx, c);

  for (int i = 3; i >= 0; --i) {
    const Tensor& in = i == 0 ? trace.image : trace.stem_out[static_cast<std::size_t>(i - 1)];
    Tensor din = Tensor::zeros_like(in);
    stem_block_backward(in, params.stem_w[static_cast<std::size_t>(i)], trace.stem_out[static_cast<std::size_t>(i)],
                        dfeat, din, grads.stem_w[static_cast<std::size_t>(i)],
                        grads.stem_b[static_cast<std::size_t>(i)]);
    dfeat = std::move(din);
  }
  check_finite(grads);
}

void save_checkpoint(const std::string& path, const ParameterSet& params, const ModelConfig& cfg) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open '" + path + "' for writing");
  out.write("BATCKPT1", 8);
  const std::uint32_t header[7] = {
      static_cast<std::uint32_t>(cfg.image_side), static_cast<std::uint32_t>(cfg.patch_side),
      static_cast<std::uint32_t>(cfg.channels),   static_cast<std::uint32_t>(cfg.layers),
      static_cast<std::uint32_t>(cfg.heads),      static_cast<std::uint32_t>(cfg.mlp_hidden),
      cfg.bag ? 1u : 0u};
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  params.for_each([&](const std::string&, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * sizeof(double)));
  });
  if (!out) throw std::runtime_error("failed writing checkpoint '" + path + "'");
}

std::pair<ParameterSet, ModelConfig> load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "' for reading");
  char magic[8];
  in.read(magic, 8);
  if (in.gcount() != 8 || std::memcmp(magic, "BATCKPT1", 8) != 0)
    throw std::runtime_error("'" + path + "' is not a BATCKPT1 checkpoint");
  std::uint32_t header[7];
  in.read(reinterpret_cast<char*>(header), sizeof(header));
  if (static_cast<std::size_t>(in.gcount()) != sizeof(header))
    throw std::runtime_error("truncated checkpoint header in '" + path + "'");
  ModelConfig cfg;
  cfg.image_side = static_cast<int>(header[0]);
  cfg.patch_side = static_cast<int>(header[1]);
  cfg.channels = static_cast<int>(header[2]);
  cfg.layers = static_cast<int>(header[3]);
  cfg.heads = static_cast<int>(header[4]);
  cfg.mlp_hidden = static_cast<int>(header[5]);
  cfg.bag = header[6] != 0;
  cfg.validate();
  ParameterSet params = zero_params(cfg);
  params.for_each([&](const std::string& name, Tensor& t) {
    in.read(reinterpret_cast<char*>(t.v.data()), static_cast<std::streamsize>(t.v.size() * sizeof(double)));
    if (static_cast<std::size_t>(in.gcount()) != t.v.size() * sizeof(double))
      throw std::runtime_error("truncated checkpoint tensor '" + name + "' in '" + path + "'");
  });
  char extra;
  if (in.read(&extra, 1)) throw std::runtime_error("trailing bytes in checkpoint '" + path + "'");
  return {std::move(params), cfg};
}

}  // namespace bat::model
