#include "oracles.hpp"

#include <cmath>
#include <set>
#include <stdexcept>

namespace oracle {

namespace {

bool fg(const bat::BinaryMask& m, int r, int c) {
  return r >= 0 && r < m.height && c >= 0 && c < m.width && m.at(r, c) != 0;
}

bool on_boundary(const bat::BinaryMask& m, int r, int c) {
  return fg(m, r, c) && (!fg(m, r - 1, c) || !fg(m, r + 1, c) || !fg(m, r, c - 1) || !fg(m, r, c + 1));
}

// clockwise compass from north
const int OFF[8][2] = {{-1, 0}, {-1, 1}, {0, 1}, {1, 1}, {1, 0}, {1, -1}, {0, -1}, {-1, -1}};

int offset_index(int dr, int dc) {
  for (int i = 0; i < 8; ++i)
    if (OFF[i][0] == dr && OFF[i][1] == dc) return i;
  throw std::logic_error("bad offset");
}

struct TracedPoint {
  int row, col, contour;
};

std::vector<TracedPoint> trace_reference(const bat::BinaryMask& mask) {
  std::vector<TracedPoint> emitted;
  std::set<std::pair<int, int>> done;  // emitted pixels
  int contour = 0;
  for (int sr = 0; sr < mask.height; ++sr) {
    for (int sc = 0; sc < mask.width; ++sc) {
      if (!on_boundary(mask, sr, sc) || done.count({sr, sc})) continue;
      int back = -1;
      for (int d : {0, 2, 4, 6})
        if (!fg(mask, sr + OFF[d][0], sc + OFF[d][1])) {
          back = d;
          break;
        }
      std::set<std::tuple<int, int, int>> states;
      int r = sr, c = sc, b = back;
      states.insert({r, c, b});
      while (true) {
        if (on_boundary(mask, r, c) && !done.count({r, c})) {
          done.insert({r, c});
          emitted.push_back({r, c, contour});
        }
        int hit = -1;
        for (int j = 1; j <= 8; ++j) {
          const int d = (b + j) % 8;
          if (fg(mask, r + OFF[d][0], c + OFF[d][1])) {
            hit = d;
            break;
          }
        }
        if (hit < 0) break;
        const int prev = (hit + 7) % 8;
        const int pr = r + OFF[prev][0], pc = c + OFF[prev][1];
        const int nr = r + OFF[hit][0], nc = c + OFF[hit][1];
        const int nb = offset_index(pr - nr, pc - nc);
        if (states.count({nr, nc, nb})) break;
        states.insert({nr, nc, nb});
        r = nr;
        c = nc;
        b = nb;
      }
      ++contour;
    }
  }
  return emitted;
}

}  // namespace

std::vector<std::pair<int, int>> boundary_set(const bat::BinaryMask& mask) {
  std::vector<std::pair<int, int>> out;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c)
      if (on_boundary(mask, r, c)) out.emplace_back(r, c);
  return out;
}

std::pair<long, long> disc_counts(const bat::BinaryMask& mask, int row, int col, int radius) {
  long total = 0, lesion = 0;
  for (int r = 0; r < mask.height; ++r)
    for (int c = 0; c < mask.width; ++c) {
      if ((r - row) * (r - row) + (c - col) * (c - col) > radius * radius) continue;
      ++total;
      if (mask.at(r, c)) ++lesion;
    }
  return {total, lesion};
}

std::vector<std::size_t> nms_keep_indices(const std::vector<double>& scores, int k) {
  const std::size_t m = scores.size();
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < m; ++i) {
    bool best = true;
    std::set<std::size_t> window;
    for (int d = -k; d <= k; ++d) {
      long j = (static_cast<long>(i) + d) % static_cast<long>(m);
      if (j < 0) j += static_cast<long>(m);
      window.insert(static_cast<std::size_t>(j));
    }
    for (std::size_t j : window) {
      if (j == i) continue;
      if (scores[j] > scores[i] || (scores[j] == scores[i] && j < i)) {
        best = false;
        break;
      }
    }
    if (best) keep.push_back(i);
  }
  return keep;
}

bat::keypatch::KeyPatchMap keypatch_pipeline(const bat::BinaryMask& mask, int radius, int nms_neighbors,
                                             int patch_side) {
  auto traced = trace_reference(mask);

  std::vector<double> scores(traced.size());
  for (std::size_t i = 0; i < traced.size(); ++i) {
    auto [total, lesion] = disc_counts(mask, traced[i].row, traced[i].col, radius);
    scores[i] = std::abs(static_cast<double>(lesion) / static_cast<double>(total) - 0.5);
  }

  bat::keypatch::KeyPatchMap map;
  map.grid_rows = mask.height / patch_side;
  map.grid_cols = mask.width / patch_side;
  map.values.assign(static_cast<std::size_t>(map.grid_rows) * map.grid_cols, 0);

  std::size_t begin = 0;
  while (begin < traced.size()) {
    std::size_t end = begin;
    while (end < traced.size() && traced[end].contour == traced[begin].contour) ++end;
    std::vector<double> contour_scores(scores.begin() + static_cast<long>(begin),
                                       scores.begin() + static_cast<long>(end));
    for (std::size_t rel : nms_keep_indices(contour_scores, nms_neighbors)) {
      const auto& p = traced[begin + rel];
      map.values[static_cast<std::size_t>((p.row / patch_side) * map.grid_cols + p.col / patch_side)] = 1;
    }
    begin = end;
  }
  return map;
}

bat::Tensor msa_reference(const bat::Tensor& z, const bat::model::LayerParams& lp,
                          const bat::model::ModelConfig& cfg) {
  const std::size_t L = z.dim(0), C = z.dim(1);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim());

  bat::Tensor xn{L, C};
  for (std::size_t i = 0; i < L; ++i) {
    double mu = 0.0;
    for (std::size_t c = 0; c < C; ++c) mu += z(i, c);
    mu /= static_cast<double>(C);
    double var = 0.0;
    for (std::size_t c = 0; c < C; ++c) var += (z(i, c) - mu) * (z(i, c) - mu);
    var /= static_cast<double>(C);
    for (std::size_t c = 0; c < C; ++c) xn(i, c) = (z(i, c) - mu) / std::sqrt(var + 1e-6);
  }

  auto project = [&](const bat::Tensor& w, const bat::Tensor& b) {
    bat::Tensor y{L, C};
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < C; ++j) {
        y(i, j) = b.v[j];
        for (std::size_t a = 0; a < C; ++a) y(i, j) += xn(i, a) * w(a, j);
      }
    return y;
  };
  bat::Tensor q = project(lp.wq, lp.bq), k = project(lp.wk, lp.bk), vv = project(lp.wv, lp.bv);

  bat::Tensor concat{L, C};
  for (int h = 0; h < cfg.heads; ++h) {
    const std::size_t off = static_cast<std::size_t>(h) * hd;
    for (std::size_t i = 0; i < L; ++i) {
      std::vector<double> e(L);
      double denom = 0.0;
      for (std::size_t j = 0; j < L; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < hd; ++d) s += q(i, off + d) * k(j, off + d);
        e[j] = std::exp(s / std::sqrt(static_cast<double>(hd)));
        denom += e[j];
      }
      for (std::size_t d = 0; d < hd; ++d) {
        double acc = 0.0;
        for (std::size_t j = 0; j < L; ++j) acc += e[j] / denom * vv(j, off + d);
        concat(i, off + d) = acc;
      }
    }
  }

  bat::Tensor out{L, C};
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < C; ++j) {
      out(i, j) = lp.bo.v[j];
      for (std::size_t a = 0; a < C; ++a) out(i, j) += concat(i, a) * lp.wo(a, j);
    }
  return out;
}

bat::Tensor dilated_conv_reference(const bat::Tensor& grid, const bat::Tensor& w, const bat::Tensor& b, int rate) {
  const std::size_t gh = grid.dim(0), gw = grid.dim(1), ic = grid.dim(2);
  const std::size_t oc = w.dim(0);
  const std::size_t pad = static_cast<std::size_t>(rate);
  bat::Tensor padded{gh + 2 * pad, gw + 2 * pad, ic};
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      for (std::size_t c = 0; c < ic; ++c) padded(y + pad, x + pad, c) = grid(y, x, c);

  bat::Tensor out{gh, gw, oc};
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      for (std::size_t o = 0; o < oc; ++o) {
        double acc = b.v[o];
        for (std::size_t c = 0; c < ic; ++c)
          for (std::size_t ky = 0; ky < 3; ++ky)
            for (std::size_t kx = 0; kx < 3; ++kx)
              acc += w(o, c, ky, kx) * padded(y + ky * pad, x + kx * pad, c);
        out(y, x, o) = acc;
      }
  return out;
}

bat::Tensor atrous_reference(const bat::Tensor& z, const bat::model::ParameterSet& p,
                             const bat::model::ModelConfig& cfg) {
  const std::size_t gh = static_cast<std::size_t>(cfg.grid_rows());
  const std::size_t gw = static_cast<std::size_t>(cfg.grid_cols());
  const std::size_t C = static_cast<std::size_t>(cfg.channels);

  bat::Tensor grid{gh, gw, C};
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x)
      for (std::size_t c = 0; c < C; ++c) grid(y, x, c) = z(y * gw + x, c);

  const bat::Tensor c1 = dilated_conv_reference(grid, p.at_w1, p.at_b1, 1);
  const bat::Tensor c3 = dilated_conv_reference(grid, p.at_w3, p.at_b3, 3);
  const bat::Tensor c6 = dilated_conv_reference(grid, p.at_w6, p.at_b6, 6);

  bat::Tensor logits{gh, gw};
  for (std::size_t y = 0; y < gh; ++y)
    for (std::size_t x = 0; x < gw; ++x) {
      double acc = p.at_proj_b.v[0];
      for (std::size_t c = 0; c < C; ++c) {
        acc += p.at_proj_w.v[c] * c1(y, x, c);
        acc += p.at_proj_w.v[C + c] * c3(y, x, c);
        acc += p.at_proj_w.v[2 * C + c] * c6(y, x, c);
      }
      logits(y, x) = acc;
    }

  const int f = cfg.patch_side;
  bat::Tensor seg{gh * static_cast<std::size_t>(f), gw * static_cast<std::size_t>(f)};
  for (std::size_t oy = 0; oy < seg.dim(0); ++oy)
    for (std::size_t ox = 0; ox < seg.dim(1); ++ox) {
      const double sy = (oy + 0.5) / f - 0.5;
      const double sx = (ox + 0.5) / f - 0.5;
      auto clampi = [](long i, long n) { return i < 0 ? 0 : (i >= n ? n - 1 : i); };
      const long y0 = clampi(static_cast<long>(std::floor(sy)), static_cast<long>(gh));
      const long y1 = clampi(static_cast<long>(std::floor(sy)) + 1, static_cast<long>(gh));
      const long x0 = clampi(static_cast<long>(std::floor(sx)), static_cast<long>(gw));
      const long x1 = clampi(static_cast<long>(std::floor(sx)) + 1, static_cast<long>(gw));
      const double fy = sy - std::floor(sy);
      const double fx = sx - std::floor(sx);
      const double val =
          (1 - fy) * ((1 - fx) * logits(static_cast<std::size_t>(y0), static_cast<std::size_t>(x0)) +
                      fx * logits(static_cast<std::size_t>(y0), static_cast<std::size_t>(x1))) +
          fy * ((1 - fx) * logits(static_cast<std::size_t>(y1), static_cast<std::size_t>(x0)) +
                fx * logits(static_cast<std::size_t>(y1), static_cast<std::size_t>(x1)));
      seg(oy, ox) = 1.0 / (1.0 + std::exp(-val));
    }
  return seg;
}

bat::BinaryMask ellipse_raster(double cy, double cx, double ra, double rb, double phi, int side) {
  bat::BinaryMask mask(side, side);
  const double cs = std::cos(phi), sn = std::sin(phi);
  for (int r = 0; r < side; ++r)
    for (int c = 0; c < side; ++c) {
      const double dy = r - cy, dx = c - cx;
      const double X = dx * cs + dy * sn;
      const double Y = -dx * sn + dy * cs;
      if ((X / ra) * (X / ra) + (Y / rb) * (Y / rb) <= 1.0) mask.at(r, c) = 1;
    }
  return mask;
}

}  // namespace oracle
