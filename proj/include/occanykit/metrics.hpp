// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/occupancy.hpp"

namespace occanykit {

/// A ratio that may be 0/0. Undefined values are never folded into 0 or 100.
using Percent = std::optional<double>;

inline Percent percent(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return std::nullopt;
  return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

struct BinaryMetrics {
  std::uint64_t tp = 0, fp = 0, fn = 0;
  Percent precision, recall, iou;
};

/// Precision / recall / IoU of the occupied class over known voxels.
inline BinaryMetrics binary_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt,
                                    std::span<const std::uint8_t> known) {
  if (pred.size() != gt.size() || pred.size() != known.size())
    throw ValidationError("binary_metrics: grid sizes differ");
  BinaryMetrics m;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (!known[v]) continue;
    const bool p = pred[v] != 0, g = gt[v] != 0;
    m.tp += (p && g) ? 1 : 0;
    m.fp += (p && !g) ? 1 : 0;
    m.fn += (!p && g) ? 1 : 0;
  }
  m.precision = percent(m.tp, m.tp + m.fp);
  m.recall = percent(m.tp, m.tp + m.fn);
  m.iou = percent(m.tp, m.tp + m.fp + m.fn);
  return m;
}

inline BinaryMetrics binary_metrics(const VoxelGrid& pred, const VoxelGrid& gt,
                                    std::span<const std::uint8_t> known) {
  if (!(pred.spec == gt.spec)) throw ValidationError("binary_metrics: grid specs differ");
  return binary_metrics(pred.occupied, gt.occupied, known);
}

/// Class names, super-class grouping and ignored ids. Class 0 is free space.
struct ClassMapping {
  std::map<std::uint16_t, std::string> names;
  std::map<std::uint16_t, std::uint16_t> superclass;
  std::map<std::uint16_t, std::string> superclass_names;
  std::set<std::uint16_t> ignore;

  void validate() const {
    for (const auto& [id, _] : names) {
      if (id == 0 || ignore.count(id)) continue;
      if (!superclass.count(id))
        throw ValidationError("class mapping: class " + std::to_string(id) + " has no super-class");
    }
  }

  bool known_label(std::uint16_t id) const { return id == 0 || names.count(id) || ignore.count(id); }

  std::string name(std::uint16_t id, bool super) const {
    const auto& table = super ? superclass_names : names;
    auto it = table.find(id);
    return it != table.end() ? it->second : std::to_string(id);
  }

  /// Synthetic-scene classes grouped into the six default super-classes.
  static ClassMapping synthetic_default() {
    ClassMapping m;
    m.names = {{1, "road"}, {2, "building"}, {3, "car"}, {4, "pole"}, {5, "truck"},
               {6, "vegetation"}, {7, "person"}, {255, "unknown"}};
    m.superclass_names = {{1, "vehicle"}, {2, "human"}, {3, "flat"}, {4, "structure"},
                          {5, "nature"}, {6, "object"}};
    m.superclass = {{1, 3}, {2, 4}, {3, 1}, {4, 6}, {5, 1}, {6, 5}, {7, 2}};
    m.ignore = {255};
    return m;
  }
};

inline void from_json(const nlohmann::json& j, ClassMapping& m) {
  m = ClassMapping{};
  for (const auto& c : j.at("classes")) {
    const auto id = c.at("id").get<std::uint16_t>();
    m.names[id] = c.at("name").get<std::string>();
    if (c.value("ignore", false)) {
      m.ignore.insert(id);
    } else {
      m.superclass[id] = c.at("superclass").get<std::uint16_t>();
    }
  }
  for (const auto& s : j.at("superclasses"))
    m.superclass_names[s.at("id").get<std::uint16_t>()] = s.at("name").get<std::string>();
  m.validate();
}

inline ClassMapping load_class_mapping(const std::filesystem::path& path) {
  return read_json(path).get<ClassMapping>();
}

struct SemanticMetrics {
  std::map<std::string, Percent> per_class_iou;
  Percent miou;
};

/// Per-class IoU over known voxels and its mean. Classes absent from both
/// prediction and ground truth are left out of the mean; ignored classes
/// are excluded everywhere.
inline SemanticMetrics semantic_miou(std::span<const std::uint16_t> pred, std::span<const std::uint16_t> gt,
                                     std::span<const std::uint8_t> known, const ClassMapping& mapping,
                                     bool use_superclass) {
  if (pred.size() != gt.size() || pred.size() != known.size())
    throw ValidationError("semantic_miou: grid sizes differ");
  auto remap = [&](std::uint16_t id) -> std::optional<std::uint16_t> {
    if (!mapping.known_label(id)) throw ValidationError("semantic_miou: label " + std::to_string(id) + " outside mapping");
    if (mapping.ignore.count(id)) return std::nullopt;
    if (id == 0 || !use_superclass) return id;
    return mapping.superclass.at(id);
  };
  struct Counts { std::uint64_t tp = 0, fp = 0, fn = 0; };
  std::map<std::uint16_t, Counts> counts;
  for (std::size_t v = 0; v < pred.size(); ++v) {
    if (!known[v]) continue;
    const auto g = remap(gt[v]);
    if (!g) continue;  // voxel of an ignored ground-truth class
    auto p = remap(pred[v]);
    const std::uint16_t pc = p ? *p : std::uint16_t{0};
    if (pc == *g) {
      if (pc != 0) ++counts[pc].tp;
    } else {
      if (pc != 0) ++counts[pc].fp;
      if (*g != 0) ++counts[*g].fn;
    }
  }
  SemanticMetrics out;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& [cls, c] : counts) {
    const Percent iou = percent(c.tp, c.tp + c.fp + c.fn);
    out.per_class_iou[mapping.name(cls, use_superclass)] = iou;
    if (iou) {
      sum += *iou;
      ++n;
    }
  }
  if (n > 0) out.miou = sum / static_cast<double>(n);
  return out;
}

struct MetricsReport {
  Percent precision, recall, iou;
  std::map<std::string, Percent> per_class_iou;
  std::map<std::string, Percent> per_superclass_iou;
  Percent miou, miou_sc;
  std::uint64_t tp = 0, fp = 0, fn = 0;
};

inline MetricsReport evaluate_grids(const VoxelGrid& pred, const VoxelGrid& gt, const ClassMapping& mapping) {
  if (!(pred.spec == gt.spec)) throw ValidationError("evaluate: grid specs differ");
  const auto& known = gt.known;
  MetricsReport r;
  const BinaryMetrics b = binary_metrics(pred.occupied, gt.occupied, known);
  r.precision = b.precision;
  r.recall = b.recall;
  r.iou = b.iou;
  r.tp = b.tp;
  r.fp = b.fp;
  r.fn = b.fn;
  // Unoccupied predictions count as free whatever their label.
  std::vector<std::uint16_t> pl(pred.label), gl(gt.label);
  for (std::size_t v = 0; v < pl.size(); ++v) {
    if (!pred.occupied[v]) pl[v] = 0;
    if (!gt.occupied[v]) gl[v] = 0;
  }
  const auto sem = semantic_miou(pl, gl, known, mapping, false);
  const auto sup = semantic_miou(pl, gl, known, mapping, true);
  r.per_class_iou = sem.per_class_iou;
  r.miou = sem.miou;
  r.per_superclass_iou = sup.per_class_iou;
  r.miou_sc = sup.miou;
  return r;
}

inline nlohmann::json percent_json(const Percent& p) {
  return p ? nlohmann::json(*p) : nlohmann::json("undefined");
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["precision"] = percent_json(r.precision);
  j["recall"] = percent_json(r.recall);
  j["iou"] = percent_json(r.iou);
  j["miou"] = percent_json(r.miou);
  j["miou_sc"] = percent_json(r.miou_sc);
  j["counts"] = {{"tp", r.tp}, {"fp", r.fp}, {"fn", r.fn}};
  nlohmann::json pc = nlohmann::json::object(), ps = nlohmann::json::object();
  for (const auto& [k, v] : r.per_class_iou) pc[k] = percent_json(v);
  for (const auto& [k, v] : r.per_superclass_iou) ps[k] = percent_json(v);
  j["per_class_iou"] = pc;
  j["per_superclass_iou"] = ps;
  return j;
}

inline std::string format_percent(const Percent& p) {
  if (!p) return "undefined";
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << *p;
  return s.str();
}

/// One-row Markdown table: Prec. | Rec. | IoU | mIoU | mIoU^sc.
inline std::string to_markdown(const MetricsReport& r) {
  std::ostringstream s;
  s << "| Prec. | Rec. | IoU | mIoU | mIoU^sc |\n"
    << "|---|---|---|---|---|\n"
    << "| " << format_percent(r.precision) << " | " << format_percent(r.recall) << " | "
    << format_percent(r.iou) << " | " << format_percent(r.miou) << " | " << format_percent(r.miou_sc)
    << " |\n";
  if (!r.per_class_iou.empty()) {
    s << "\n| class | IoU |\n|---|---|\n";
    for (const auto& [k, v] : r.per_class_iou) s << "| " << k << " | " << format_percent(v) << " |\n";
  }
  return s.str();
}

}  // namespace occanykit
