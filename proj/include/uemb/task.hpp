#pragma once

#include <charconv>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>

#include "uemb/error.hpp"
#include "uemb/formatting.hpp"

namespace uemb {

/// A per-query score: hit@1, ndcg@k or recall@k.
struct Metric {
  enum class Kind { hit, ndcg, recall };
  Kind kind = Kind::hit;
  std::size_t k = 1;

  static Metric hit_at_1() { return {Kind::hit, 1}; }
  static Metric ndcg_at(std::size_t k) { return {Kind::ndcg, k}; }
  static Metric recall_at(std::size_t k) { return {Kind::recall, k}; }

  static Metric parse(std::string_view s) {
    const auto at = s.find('@');
    if (at == std::string_view::npos) throw ValidationError("bad metric '" + std::string(s) + "'");
    const auto head = s.substr(0, at);
    const auto tail = s.substr(at + 1);
    std::size_t k = 0;
    auto [ptr, ec] = std::from_chars(tail.data(), tail.data() + tail.size(), k);
    if (ec != std::errc() || ptr != tail.data() + tail.size() || k == 0) {
      throw ValidationError("bad metric cutoff in '" + std::string(s) + "'");
    }
    if (head == "hit" && k == 1) return hit_at_1();
    if (head == "ndcg") return ndcg_at(k);
    if (head == "recall") return recall_at(k);
    throw ValidationError("unknown metric '" + std::string(s) + "'");
  }

  std::string name() const {
    switch (kind) {
      case Kind::hit: return "hit@1";
      case Kind::ndcg: return "ndcg@" + std::to_string(k);
      case Kind::recall: return "recall@" + std::to_string(k);
    }
    return {};
  }

  friend bool operator==(const Metric&, const Metric&) = default;
};

enum class PoolMode { shared, per_query };

/// Image, video and visual-document meta-task groups. Categories are named
/// "I-...", "V-..." or "D-..." by convention, e.g. "I-CLS" or "V-MRET".
inline std::optional<std::string> default_group_of(std::string_view category) {
  if (category.starts_with("I-")) return "Image";
  if (category.starts_with("V-")) return "Video";
  if (category.starts_with("D-")) return "VisDoc";
  return std::nullopt;
}

/// One evaluation task and where its data lives.
struct TaskManifest {
  std::string name;
  std::string category;  // meta-task category, e.g. "V-RET"
  std::string group;     // "Image", "Video", "VisDoc", ...
  Modality query_mod;
  Modality target_mod;
  Metric metric = Metric::hit_at_1();
  std::string instruction;
  std::string target_instruction;
  PoolMode pool_mode = PoolMode::shared;
  std::size_t num_queries = 0;
  std::size_t num_candidates = 0;
  /// Data files; relative paths are resolved against the manifest's directory.
  std::string queries_path;
  std::string candidates_path;
  std::string qrels_path;
};

}  // namespace uemb
