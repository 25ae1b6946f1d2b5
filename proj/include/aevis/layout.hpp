#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aevis/pattern.hpp"

namespace aevis {

struct Rect {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double cx() const { return x + w / 2.0; }
  double cy() const { return y + h / 2.0; }
  friend bool operator==(const Rect&, const Rect&) = default;
};

struct Point {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// One point per layer (group) on each of the three curves.
struct RiverLayout {
  std::vector<Point> source;
  std::vector<Point> adversarial;
  std::vector<Point> target;
  std::vector<std::string> labels;
  double curve_width = 0.0;
};

/// Source and target sit scale * d1 apart, symmetric about the canvas
/// midline; the adversarial curve divides that gap in the ratio d2 : d3
/// (midpoint when both are zero). x positions are uniform.
RiverLayout river_layout(std::span<const double> d1, std::span<const double> d2, std::span<const double> d3,
                         const Rect& canvas, double scale, std::vector<std::string> labels = {});

/// Scale that spreads the widest source-target gap over 80% of the canvas
/// height; 1 when every d1 is zero.
double default_river_scale(std::span<const double> d1, double height);

struct TreemapCell {
  std::size_t region = 0;  // index into SetRelation::regions
  std::uint32_t signature = 0;
  std::size_t parent_set = 0;
  std::size_t size = 0;
  Rect rect;
};

struct TreemapLayout {
  Rect canvas;
  std::vector<TreemapCell> cells;
};

/// Placement choices: the set each region is nested under (a set in its
/// signature), the top-level order of sets and the sibling order inside
/// every set.
struct TreemapPlan {
  std::vector<std::size_t> parent;               // per region
  std::vector<std::size_t> set_order;            // set indices
  std::vector<std::vector<std::size_t>> children;  // per set: region indices in order
};

/// Squarified layout of one fixed plan.
TreemapLayout treemap_layout(const SetRelation& relation, const Rect& canvas, const TreemapPlan& plan);

/// Searches every parent assignment and sibling order and returns the
/// layout with the smallest treemap_objective. Ties keep the earliest
/// candidate; the enumeration starts from nesting shared regions under the
/// largest member set (lowest index on equal sizes).
TreemapLayout treemap_layout(const SetRelation& relation, const Rect& canvas);

/// Sum over shared regions of the squared distance between the region's
/// cell center and the mean of its member sets' centers, a set's center
/// being the center of the bounding box of all its cells.
double treemap_objective(const TreemapLayout& layout, const SetRelation& relation);

/// Default nesting target of a region: its largest member set.
std::size_t largest_member_set(const SetRelation& relation, std::uint32_t signature);

std::string save_river(const RiverLayout& layout);
std::string save_treemap(const TreemapLayout& layout, const SetRelation& relation);
std::string river_svg(const RiverLayout& layout, const Rect& canvas);
std::string treemap_svg(const TreemapLayout& layout);

}  // namespace aevis
