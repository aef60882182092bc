#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "bat/image.hpp"

namespace bat::keypatch {

// A lesion pixel with at least one background 4-neighbor, annotated with the
// lesion proportion of the disc around it and the ambiguity score |p - 0.5|.
struct BoundaryPoint {
  int row = 0;
  int col = 0;
  int contour = 0;  // contour id in discovery order (row-major start pixel)
  double proportion = 0.0;
  double score = 0.0;
};

// L-length binary ground-truth key-patch map over the patch grid.
struct KeyPatchMap {
  int grid_rows = 0;
  int grid_cols = 0;
  std::vector<std::uint8_t> values;  // row-major, length grid_rows * grid_cols

  std::size_t length() const { return values.size(); }
  bool operator==(const KeyPatchMap& o) const {
    return grid_rows == o.grid_rows && grid_cols == o.grid_cols && values == o.values;
  }
};

struct GeneratorConfig {
  int radius = 10;
  int nms_neighbors = 30;
  int patch_side = 16;
};

// Boundary pixels (4-neighbor criterion, outside the image is background),
// ordered per contour by a clockwise Moore-neighbor walk starting from the
// topmost-then-leftmost pixel of each contour; contours ordered by start
// pixel in row-major order. Each boundary pixel appears exactly once, on the
// first contour that reaches it.
std::vector<BoundaryPoint> trace_boundary(const BinaryMask& mask);

// Fraction of lesion pixels among in-image pixels of the disc
// (dr^2 + dc^2 <= radius^2) centered at (row, col).
double circle_proportion(const BinaryMask& mask, int row, int col, int radius);

// Annotates each point with proportion and score = |proportion - 0.5|.
std::vector<BoundaryPoint> score_boundary(std::vector<BoundaryPoint> points,
                                          const BinaryMask& mask, const GeneratorConfig& cfg);

// Keeps point i iff its score is maximal within contour distance
// <= nms_neighbors on its contour (window wraps), ties won by the earliest
// contour index inside the window.
std::vector<BoundaryPoint> nms_filter(const std::vector<BoundaryPoint>& points, int nms_neighbors);

// Row-major patch index: floor(row/patch_side) * grid_cols + floor(col/patch_side).
int to_patch_index(int row, int col, int patch_side, int grid_cols);

// trace -> score -> nms -> patch indices; 1 exactly at patches hit by a
// retained point. Deterministic.
KeyPatchMap generate_keypatch_map(const BinaryMask& mask, const GeneratorConfig& cfg);

// {"grid_rows": .., "grid_cols": .., "values": [..]}
std::string keypatch_map_to_json(const KeyPatchMap& map);
KeyPatchMap keypatch_map_from_json(const std::string& text);

}  // namespace bat::keypatch
