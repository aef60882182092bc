#include "bat/keypatch.hpp"

#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace bat::keypatch {

namespace {

// 8-neighborhood, clockwise from north (row down, col right).
constexpr int kDr[8] = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr int kDc[8] = {0, 1, 1, 1, 0, -1, -1, -1};
// 4-neighbors in the same clockwise order: N, E, S, W.
constexpr int kDir4[4] = {0, 2, 4, 6};

bool is_boundary(const BinaryMask& m, int r, int c) {
  if (!m.lesion(r, c)) return false;
  for (int d : kDir4) {
    if (!m.lesion(r + kDr[d], c + kDc[d])) return true;
  }
  return false;
}

int direction_index(int dr, int dc) {
  for (int d = 0; d < 8; ++d) {
    if (kDr[d] == dr && kDc[d] == dc) return d;
  }
  throw std::logic_error("not an 8-neighbor offset");
}

}  // namespace

std::vector<BoundaryPoint> trace_boundary(const BinaryMask& mask) {
  const int h = mask.height, w = mask.width;
  std::vector<std::uint8_t> boundary(static_cast<std::size_t>(h) * w, 0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) boundary[static_cast<std::size_t>(r) * w + c] = is_boundary(mask, r, c) ? 1 : 0;

  std::vector<std::uint8_t> emitted(static_cast<std::size_t>(h) * w, 0);
  // one flag per (pixel, backtrack direction) walk state
  std::vector<std::uint8_t> seen_state(static_cast<std::size_t>(h) * w * 8, 0);

  std::vector<BoundaryPoint> out;
  int contour_id = 0;

  for (int sr = 0; sr < h; ++sr) {
    for (int sc = 0; sc < w; ++sc) {
      const std::size_t sidx = static_cast<std::size_t>(sr) * w + sc;
      if (!boundary[sidx] || emitted[sidx]) continue;

      // Moore-neighbor walk around the background region behind the first
      // free background 4-neighbor (N, E, S, W order).
      int back = -1;
      for (int d : kDir4) {
        if (!mask.lesion(sr + kDr[d], sc + kDc[d])) {
          back = d;
          break;
        }
      }

      int cr = sr, cc = sc, cb = back;
      seen_state[(static_cast<std::size_t>(cr) * w + cc) * 8 + cb] = 1;
      while (true) {
        const std::size_t cidx = static_cast<std::size_t>(cr) * w + cc;
        if (boundary[cidx] && !emitted[cidx]) {
          emitted[cidx] = 1;
          out.push_back(BoundaryPoint{cr, cc, contour_id, 0.0, 0.0});
        }
        int found = -1;
        for (int j = 1; j <= 8; ++j) {
          const int d = (cb + j) % 8;
          if (mask.lesion(cr + kDr[d], cc + kDc[d])) {
            found = d;
            break;
          }
        }
        if (found < 0) break;  // isolated pixel
        // backtrack of the next pixel = last background cell scanned before it
        const int dprev = (found + 7) % 8;
        const int pr = cr + kDr[dprev], pc = cc + kDc[dprev];
        const int nr = cr + kDr[found], nc = cc + kDc[found];
        const int nb = direction_index(pr - nr, pc - nc);
        std::uint8_t& flag = seen_state[(static_cast<std::size_t>(nr) * w + nc) * 8 + nb];
        if (flag) break;
        flag = 1;
        cr = nr;
        cc = nc;
        cb = nb;
      }
      ++contour_id;
    }
  }
  return out;
}

double circle_proportion(const BinaryMask& mask, int row, int col, int radius) {
  if (!mask.inside(row, col)) throw std::invalid_argument("circle center outside image");
  if (radius < 1) throw std::invalid_argument("radius must be >= 1");
  const int r2 = radius * radius;
  long lesion = 0, total = 0;
  for (int dr = -radius; dr <= radius; ++dr) {
    const int qr = row + dr;
    if (qr < 0 || qr >= mask.height) continue;
    for (int dc = -radius; dc <= radius; ++dc) {
      const int qc = col + dc;
      if (qc < 0 || qc >= mask.width) continue;
      if (dr * dr + dc * dc > r2) continue;
      ++total;
      lesion += mask.at(qr, qc);
    }
  }
  return static_cast<double>(lesion) / static_cast<double>(total);
}

std::vector<BoundaryPoint> score_boundary(std::vector<BoundaryPoint> points, const BinaryMask& mask,
                                          const GeneratorConfig& cfg) {
  for (auto& p : points) {
    p.proportion = circle_proportion(mask, p.row, p.col, cfg.radius);
    p.score = std::abs(p.proportion - 0.5);
  }
  return points;
}

std::vector<BoundaryPoint> nms_filter(const std::vector<BoundaryPoint>& points, int nms_neighbors) {
  if (nms_neighbors < 1) throw std::invalid_argument("nms_neighbors must be >= 1");
  std::vector<BoundaryPoint> kept;
  std::size_t begin = 0;
  while (begin < points.size()) {
    std::size_t end = begin;
    while (end < points.size() && points[end].contour == points[begin].contour) ++end;
    const std::size_t m = end - begin;
    const std::size_t k = static_cast<std::size_t>(nms_neighbors);
    for (std::size_t i = 0; i < m; ++i) {
      bool keep = true;
      for (std::size_t j = 0; j < m && keep; ++j) {
        if (j == i) continue;
        const std::size_t lin = i > j ? i - j : j - i;
        const std::size_t circ = std::min(lin, m - lin);  // window wraps around the contour
        if (circ > k) continue;
        const double si = points[begin + i].score;
        const double sj = points[begin + j].score;
        if (sj > si || (sj == si && j < i)) keep = false;
      }
      if (keep) kept.push_back(points[begin + i]);
    }
    begin = end;
  }
  return kept;
}

int to_patch_index(int row, int col, int patch_side, int grid_cols) {
  return (row / patch_side) * grid_cols + (col / patch_side);
}

KeyPatchMap generate_keypatch_map(const BinaryMask& mask, const GeneratorConfig& cfg) {
  if (cfg.patch_side < 1) throw std::invalid_argument("patch_side must be >= 1");
  if (mask.height % cfg.patch_side != 0 || mask.width % cfg.patch_side != 0)
    throw std::invalid_argument("mask dimensions must be divisible by patch_side");
  KeyPatchMap map;
  map.grid_rows = mask.height / cfg.patch_side;
  map.grid_cols = mask.width / cfg.patch_side;
  map.values.assign(static_cast<std::size_t>(map.grid_rows) * map.grid_cols, 0);

  auto points = nms_filter(score_boundary(trace_boundary(mask), mask, cfg), cfg.nms_neighbors);
  for (const auto& p : points)
    map.values[static_cast<std::size_t>(to_patch_index(p.row, p.col, cfg.patch_side, map.grid_cols))] = 1;
  return map;
}

std::string keypatch_map_to_json(const KeyPatchMap& map) {
  nlohmann::ordered_json j;
  j["grid_rows"] = map.grid_rows;
  j["grid_cols"] = map.grid_cols;
  j["values"] = map.values;
  return j.dump();
}

KeyPatchMap keypatch_map_from_json(const std::string& text) {
  auto j = nlohmann::json::parse(text);
  KeyPatchMap map;
  map.grid_rows = j.at("grid_rows").get<int>();
  map.grid_cols = j.at("grid_cols").get<int>();
  map.values = j.at("values").get<std::vector<std::uint8_t>>();
  if (map.values.size() != static_cast<std::size_t>(map.grid_rows) * map.grid_cols)
    throw std::runtime_error("key-patch map length does not match grid");
  return map;
}

}  // namespace bat::keypatch
