#include "aevis/layout.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "aevis/error.hpp"

namespace aevis {
namespace {

using nlohmann::json;

double worst_ratio(std::span<const double> row, double side) {
  const double total = std::accumulate(row.begin(), row.end(), 0.0);
  const double lo = *std::min_element(row.begin(), row.end());
  const double hi = *std::max_element(row.begin(), row.end());
  const double s2 = side * side;
  const double t2 = total * total;
  return std::max(s2 * hi / t2, t2 / (s2 * lo));
}

// Greedy squarified rows over `areas` in the given order; areas must sum to
// the rectangle's area.
std::vector<Rect> squarify(std::span<const double> areas, Rect rect) {
  std::vector<Rect> out;
  out.reserve(areas.size());
  std::size_t i = 0;
  while (i < areas.size()) {
    const double side = std::min(rect.w, rect.h);
    std::size_t end = i + 1;
    while (end < areas.size() &&
           worst_ratio(areas.subspan(i, end + 1 - i), side) <= worst_ratio(areas.subspan(i, end - i), side)) {
      ++end;
    }
    const auto row = areas.subspan(i, end - i);
    const double total = std::accumulate(row.begin(), row.end(), 0.0);
    const bool last = end == areas.size();
    if (rect.w >= rect.h) {
      const double width = last ? rect.w : total / rect.h;
      double y = rect.y;
      for (std::size_t k = 0; k < row.size(); ++k) {
        const double h = (k + 1 == row.size()) ? rect.y + rect.h - y : row[k] / width;
        out.push_back({rect.x, y, width, h});
        y += h;
      }
      rect.x += width;
      rect.w -= width;
    } else {
      const double height = last ? rect.h : total / rect.w;
      double x = rect.x;
      for (std::size_t k = 0; k < row.size(); ++k) {
        const double w = (k + 1 == row.size()) ? rect.x + rect.w - x : row[k] / height;
        out.push_back({x, rect.y, w, height});
        x += w;
      }
      rect.y += height;
      rect.h -= height;
    }
    i = end;
  }
  return out;
}

void check_relation(const SetRelation& relation) {
  if (relation.regions.empty()) throw ValidationError("set relation has no regions");
  const std::uint32_t all = (1U << relation.set_ids.size()) - 1U;
  for (const auto& r : relation.regions) {
    if (r.members.empty()) throw ValidationError("set relation region is empty");
    if (r.signature == 0 || (r.signature & ~all) != 0) throw ValidationError("region signature out of range");
  }
}

void check_finite_positive(double v, const char* what) {
  if (!std::isfinite(v) || v <= 0.0) throw ValidationError(std::string(what) + " must be finite and > 0");
}

Rect bounding_box(const std::vector<Rect>& rects) {
  double x0 = std::numeric_limits<double>::infinity(), y0 = x0;
  double x1 = -x0, y1 = -x0;
  for (const auto& r : rects) {
    x0 = std::min(x0, r.x);
    y0 = std::min(y0, r.y);
    x1 = std::max(x1, r.x + r.w);
    y1 = std::max(y1, r.y + r.h);
  }
  return {x0, y0, x1 - x0, y1 - y0};
}

std::vector<std::size_t> signature_sets(std::uint32_t signature) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < 32; ++i) {
    if (signature & (1U << i)) out.push_back(i);
  }
  return out;
}

json rect_doc(const Rect& r) { return json{{"x", r.x}, {"y", r.y}, {"w", r.w}, {"h", r.h}}; }

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

}  // namespace

double default_river_scale(std::span<const double> d1, double height) {
  double max_d1 = 0.0;
  for (double v : d1) max_d1 = std::max(max_d1, v);
  return max_d1 > 0.0 ? 0.8 * height / max_d1 : 1.0;
}

RiverLayout river_layout(std::span<const double> d1, std::span<const double> d2, std::span<const double> d3,
                         const Rect& canvas, double scale, std::vector<std::string> labels) {
  if (d1.size() != d2.size() || d1.size() != d3.size()) throw ValidationError("distance series lengths differ");
  if (d1.empty()) throw ValidationError("distance series are empty");
  if (!labels.empty() && labels.size() != d1.size()) throw ValidationError("label count does not match series");
  check_finite_positive(canvas.w, "canvas width");
  check_finite_positive(canvas.h, "canvas height");
  check_finite_positive(scale, "scale");
  for (auto s : {d1, d2, d3}) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!std::isfinite(s[i]) || s[i] < 0.0) {
        throw ValidationError("distance at layer " + std::to_string(i) + " must be finite and >= 0");
      }
    }
  }
  RiverLayout out;
  out.labels = std::move(labels);
  const std::size_t n = d1.size();
  const double mid = canvas.y + canvas.h / 2.0;
  out.curve_width = canvas.h / 40.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = canvas.x + canvas.w * (static_cast<double>(i) + 0.5) / static_cast<double>(n);
    const double half = scale * d1[i] / 2.0;
    const double ys = mid - half;
    const double yt = mid + half;
    const double denom = d2[i] + d3[i];
    const double ratio = denom > 0.0 ? d2[i] / denom : 0.5;
    out.source.push_back({x, ys});
    out.target.push_back({x, yt});
    out.adversarial.push_back({x, ys + ratio * (yt - ys)});
  }
  return out;
}

std::size_t largest_member_set(const SetRelation& relation, std::uint32_t signature) {
  std::size_t best = 0, best_size = 0;
  bool found = false;
  for (std::size_t i : signature_sets(signature)) {
    const std::size_t s = relation.set_size(i);
    if (!found || s > best_size) {
      best = i;
      best_size = s;
      found = true;
    }
  }
  return best;
}

TreemapLayout treemap_layout(const SetRelation& relation, const Rect& canvas, const TreemapPlan& plan) {
  check_relation(relation);
  check_finite_positive(canvas.w, "canvas width");
  check_finite_positive(canvas.h, "canvas height");
  const std::size_t k = relation.set_ids.size();
  const auto& regions = relation.regions;
  if (plan.parent.size() != regions.size()) throw ValidationError("plan parent count does not match regions");
  if (plan.children.size() != k) throw ValidationError("plan needs one child list per set");
  std::vector<std::size_t> seen(regions.size(), 0);
  for (std::size_t s = 0; s < k; ++s) {
    for (std::size_t r : plan.children[s]) {
      if (r >= regions.size() || plan.parent[r] != s) throw ValidationError("plan child list disagrees with parents");
      ++seen[r];
    }
  }
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (seen[r] != 1) throw ValidationError("plan places region " + std::to_string(r) + " " +
                                            std::to_string(seen[r]) + " times");
    if (!(regions[r].signature & (1U << plan.parent[r]))) {
      throw ValidationError("region " + std::to_string(r) + " nested under a set it does not belong to");
    }
  }
  std::vector<std::size_t> active;
  for (std::size_t s : plan.set_order) {
    if (s >= k) throw ValidationError("plan set order out of range");
    if (!plan.children[s].empty()) active.push_back(s);
  }
  std::size_t nonempty = 0;
  for (const auto& c : plan.children) nonempty += c.empty() ? 0 : 1;
  if (active.size() != nonempty) throw ValidationError("plan set order misses a non-empty set");

  double total = 0.0;
  for (const auto& r : regions) total += static_cast<double>(r.members.size());
  const double unit = canvas.area() / total;

  std::vector<double> top_areas;
  for (std::size_t s : active) {
    double a = 0.0;
    for (std::size_t r : plan.children[s]) a += unit * static_cast<double>(regions[r].members.size());
    top_areas.push_back(a);
  }
  const auto top_rects = squarify(top_areas, canvas);

  TreemapLayout layout;
  layout.canvas = canvas;
  for (std::size_t t = 0; t < active.size(); ++t) {
    const std::size_t s = active[t];
    std::vector<double> areas;
    for (std::size_t r : plan.children[s]) areas.push_back(unit * static_cast<double>(regions[r].members.size()));
    const auto rects = squarify(areas, top_rects[t]);
    for (std::size_t c = 0; c < rects.size(); ++c) {
      const std::size_t r = plan.children[s][c];
      layout.cells.push_back({r, regions[r].signature, s, regions[r].members.size(), rects[c]});
    }
  }
  return layout;
}

TreemapLayout treemap_layout(const SetRelation& relation, const Rect& canvas) {
  check_relation(relation);
  const std::size_t k = relation.set_ids.size();
  const auto& regions = relation.regions;

  // candidate parents per region, default first
  std::vector<std::vector<std::size_t>> candidates(regions.size());
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const std::size_t def = largest_member_set(relation, regions[r].signature);
    candidates[r].push_back(def);
    for (std::size_t s : signature_sets(regions[r].signature)) {
      if (s != def) candidates[r].push_back(s);
    }
  }

  TreemapLayout best;
  double best_value = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> pick(regions.size(), 0);
  while (true) {
    TreemapPlan plan;
    plan.children.assign(k, {});
    for (std::size_t r = 0; r < regions.size(); ++r) {
      plan.parent.push_back(candidates[r][pick[r]]);
      plan.children[plan.parent.back()].push_back(r);
    }
    for (std::size_t s = 0; s < k; ++s) {
      if (!plan.children[s].empty()) plan.set_order.push_back(s);
    }
    // every permutation of the top level, and of each sibling list
    do {
      auto children = plan.children;
      while (true) {
        TreemapPlan trial{plan.parent, plan.set_order, children};
        auto layout = treemap_layout(relation, canvas, trial);
        const double value = treemap_objective(layout, relation);
        if (value < best_value) {
          best_value = value;
          best = std::move(layout);
        }
        std::size_t s = 0;
        while (s < k && !std::next_permutation(children[s].begin(), children[s].end())) ++s;
        if (s == k) break;
      }
    } while (std::next_permutation(plan.set_order.begin(), plan.set_order.end()));

    std::size_t r = 0;
    while (r < regions.size() && ++pick[r] == candidates[r].size()) pick[r++] = 0;
    if (r == regions.size()) break;
  }
  return best;
}

double treemap_objective(const TreemapLayout& layout, const SetRelation& relation) {
  const auto& regions = relation.regions;
  std::vector<const TreemapCell*> cell_of(regions.size(), nullptr);
  for (const auto& c : layout.cells) {
    if (c.region >= regions.size()) throw ValidationError("cell refers to an unknown region");
    cell_of[c.region] = &c;
  }
  for (std::size_t r = 0; r < regions.size(); ++r) {
    if (!cell_of[r]) throw ValidationError("region " + std::to_string(r) + " has no cell");
  }
  const std::size_t k = relation.set_ids.size();
  std::vector<Point> set_center(k);
  for (std::size_t s = 0; s < k; ++s) {
    std::vector<Rect> rects;
    for (const auto& c : layout.cells) {
      if (regions[c.region].signature & (1U << s)) rects.push_back(c.rect);
    }
    if (rects.empty()) continue;
    const Rect box = bounding_box(rects);
    set_center[s] = {box.cx(), box.cy()};
  }
  double value = 0.0;
  for (std::size_t r = 0; r < regions.size(); ++r) {
    const auto sets = signature_sets(regions[r].signature);
    if (sets.size() < 2) continue;
    double mx = 0.0, my = 0.0;
    for (std::size_t s : sets) {
      mx += set_center[s].x;
      my += set_center[s].y;
    }
    mx /= static_cast<double>(sets.size());
    my /= static_cast<double>(sets.size());
    const Rect& c = cell_of[r]->rect;
    value += (c.cx() - mx) * (c.cx() - mx) + (c.cy() - my) * (c.cy() - my);
  }
  return value;
}

std::string save_river(const RiverLayout& layout) {
  auto curve = [](const std::vector<Point>& pts) {
    json a = json::array();
    for (const auto& p : pts) a.push_back(json::array({p.x, p.y}));
    return a;
  };
  return json{{"source", curve(layout.source)},
              {"adversarial", curve(layout.adversarial)},
              {"target", curve(layout.target)},
              {"labels", layout.labels},
              {"curve_width", layout.curve_width}}
      .dump();
}

std::string save_treemap(const TreemapLayout& layout, const SetRelation& relation) {
  json cells = json::array();
  for (const auto& c : layout.cells) {
    json sets = json::array();
    for (std::size_t s : signature_sets(c.signature)) sets.push_back(relation.set_ids.at(s));
    cells.push_back(json{{"region", c.region},
                         {"sets", std::move(sets)},
                         {"signature", c.signature},
                         {"parent", relation.set_ids.at(c.parent_set)},
                         {"members", relation.regions.at(c.region).members},
                         {"rect", rect_doc(c.rect)}});
  }
  return json{{"canvas", rect_doc(layout.canvas)},
              {"cells", std::move(cells)},
              {"objective", treemap_objective(layout, relation)}}
      .dump();
}

std::string river_svg(const RiverLayout& layout, const Rect& canvas) {
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << fmt(canvas.x) << ' ' << fmt(canvas.y) << ' '
      << fmt(canvas.w) << ' ' << fmt(canvas.h) << "\">\n";
  const std::pair<const std::vector<Point>*, const char*> curves[] = {
      {&layout.source, "#1b9e77"}, {&layout.adversarial, "#d95f02"}, {&layout.target, "#7570b3"}};
  const char* names[] = {"source", "adversarial", "target"};
  for (std::size_t i = 0; i < 3; ++i) {
    out << "  <polyline class=\"" << names[i] << "\" fill=\"none\" stroke=\"" << curves[i].second
        << "\" stroke-width=\"" << fmt(layout.curve_width) << "\" points=\"";
    for (std::size_t p = 0; p < curves[i].first->size(); ++p) {
      const auto& pt = (*curves[i].first)[p];
      out << (p ? " " : "") << fmt(pt.x) << ',' << fmt(pt.y);
    }
    out << "\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

std::string treemap_svg(const TreemapLayout& layout) {
  static const char* fills[] = {"#ffffff", "#a6cee3", "#b2df8a", "#1f78b4", "#fb9a99", "#cab2d6", "#33a02c", "#e31a1c"};
  std::ostringstream out;
  const Rect& c = layout.canvas;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"" << fmt(c.x) << ' ' << fmt(c.y) << ' ' << fmt(c.w)
      << ' ' << fmt(c.h) << "\">\n";
  for (const auto& cell : layout.cells) {
    out << "  <rect x=\"" << fmt(cell.rect.x) << "\" y=\"" << fmt(cell.rect.y) << "\" width=\"" << fmt(cell.rect.w)
        << "\" height=\"" << fmt(cell.rect.h) << "\" fill=\"" << fills[cell.signature & 7U]
        << "\" stroke=\"#333333\" data-signature=\"" << cell.signature << "\"/>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace aevis
