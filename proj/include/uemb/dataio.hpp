#pragma once

// On-disk formats: the UEMB embedding container, encoder checkpoints built
// from UEMB sections, JSON-lines task manifests and judgements, the engine
// configuration file, and loss traces. docs/formats.md has the byte layouts.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "uemb/contrastive.hpp"
#include "uemb/embedding_set.hpp"
#include "uemb/encoder.hpp"
#include "uemb/error.hpp"
#include "uemb/formatting.hpp"
#include "uemb/retrieval.hpp"
#include "uemb/sampler.hpp"
#include "uemb/task.hpp"
#include "uemb/tensor.hpp"
#include "uemb/train.hpp"

namespace uemb {

// ---------------------------------------------------------------------------
// UEMB container

inline constexpr char kUembMagic[4] = {'U', 'E', 'M', 'B'};
inline constexpr std::uint16_t kUembVersion = 1;
inline constexpr std::size_t kUembHeaderBytes = 20;

enum class Dtype : std::uint16_t { float32 = 1, float64 = 2 };

struct EmbeddingFileHeader {
  std::uint16_t version = kUembVersion;
  Dtype dtype = Dtype::float64;
  std::uint64_t row_count = 0;
  std::uint32_t dim = 0;
};

/// Malformed UEMB data. `kind` tells the failure modes apart.
class EmbeddingFormatError : public IoError {
 public:
  enum class Kind { bad_magic, bad_version, bad_dtype, truncated, duplicate_id, size_mismatch };

  EmbeddingFormatError(Kind kind, const std::string& what) : IoError(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

namespace detail {

inline void put_le(std::string& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> data, std::string source)
      : data_(data), source_(std::move(source)) {}

  std::uint64_t le(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(data_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }

  std::string_view bytes(std::size_t n) {
    need(n);
    std::string_view s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) {
      throw EmbeddingFormatError(EmbeddingFormatError::Kind::truncated,
                                 source_ + ": truncated at byte " + std::to_string(pos_));
    }
  }

  std::span<const std::uint8_t> data_;
  std::string source_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("error reading '" + path.string() + "'");
  return data;
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("error writing '" + path.string() + "'");
}

inline std::string read_text_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return std::string(bytes.begin(), bytes.end());
}

}  // namespace detail

/// Appends one UEMB block to `out`.
inline void encode_embeddings(std::string& out, std::span<const std::string> ids,
                              const DenseMatrix& matrix, Dtype dtype = Dtype::float64) {
  if (ids.size() != matrix.rows()) {
    throw EmbeddingFormatError(EmbeddingFormatError::Kind::size_mismatch,
                               "write_embeddings: " + std::to_string(ids.size()) + " ids for " +
                                   std::to_string(matrix.rows()) + " rows");
  }
  std::unordered_set<std::string_view> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) {
      throw EmbeddingFormatError(EmbeddingFormatError::Kind::duplicate_id,
                                 "write_embeddings: duplicate id '" + id + "'");
    }
    if (id.size() > UINT32_MAX) throw ValidationError("write_embeddings: id too long");
  }
  if (matrix.cols() > UINT32_MAX) throw ValidationError("write_embeddings: dim too large");
  if (dtype != Dtype::float32 && dtype != Dtype::float64) {
    throw EmbeddingFormatError(EmbeddingFormatError::Kind::bad_dtype, "write_embeddings: bad dtype");
  }

  out.append(kUembMagic, 4);
  detail::put_le(out, kUembVersion, 2);
  detail::put_le(out, static_cast<std::uint16_t>(dtype), 2);
  detail::put_le(out, matrix.rows(), 8);
  detail::put_le(out, matrix.cols(), 4);
  for (const auto& id : ids) {
    detail::put_le(out, id.size(), 4);
    out += id;
  }
  for (double v : matrix.values()) {
    if (dtype == Dtype::float64) {
      detail::put_le(out, std::bit_cast<std::uint64_t>(v), 8);
    } else {
      const auto f = static_cast<float>(v);
      if (!std::isfinite(f)) throw ValidationError("write_embeddings: value overflows float32");
      detail::put_le(out, std::bit_cast<std::uint32_t>(f), 4);
    }
  }
}

/// Decodes one UEMB block starting at the reader's position.
inline std::pair<EmbeddingFileHeader, EmbeddingSet> decode_embeddings(detail::ByteReader& in,
                                                                      const std::string& source) {
  using Kind = EmbeddingFormatError::Kind;
  const auto magic = in.bytes(4);
  if (std::memcmp(magic.data(), kUembMagic, 4) != 0) {
    throw EmbeddingFormatError(Kind::bad_magic, source + ": not a UEMB file (bad magic)");
  }
  EmbeddingFileHeader h;
  h.version = static_cast<std::uint16_t>(in.le(2));
  if (h.version != kUembVersion) {
    throw EmbeddingFormatError(Kind::bad_version,
                               source + ": unsupported UEMB version " + std::to_string(h.version));
  }
  const auto dtype = static_cast<std::uint16_t>(in.le(2));
  if (dtype != 1 && dtype != 2) {
    throw EmbeddingFormatError(Kind::bad_dtype, source + ": unknown dtype code " + std::to_string(dtype));
  }
  h.dtype = static_cast<Dtype>(dtype);
  h.row_count = in.le(8);
  h.dim = static_cast<std::uint32_t>(in.le(4));

  // Every row needs at least its 4-byte id length; reject absurd counts early.
  if (h.row_count > in.remaining() / 4 + 1) {
    throw EmbeddingFormatError(Kind::truncated, source + ": row count exceeds file size");
  }
  std::vector<std::string> ids;
  ids.reserve(h.row_count);
  std::unordered_set<std::string> seen;
  for (std::uint64_t r = 0; r < h.row_count; ++r) {
    const auto len = static_cast<std::size_t>(in.le(4));
    std::string id(in.bytes(len));
    if (!seen.insert(id).second) {
      throw EmbeddingFormatError(Kind::duplicate_id, source + ": duplicate id '" + id + "'");
    }
    ids.push_back(std::move(id));
  }
  const std::size_t width = h.dtype == Dtype::float64 ? 8 : 4;
  const std::uint64_t count = h.row_count * h.dim;
  if (h.dim != 0 && count / h.dim != h.row_count) {
    throw EmbeddingFormatError(Kind::size_mismatch, source + ": declared shape overflows");
  }
  if (in.remaining() / width < count) {
    throw EmbeddingFormatError(Kind::truncated, source + ": payload shorter than " +
                                                    std::to_string(h.row_count) + "x" +
                                                    std::to_string(h.dim) + " values");
  }
  std::vector<double> values(count);
  for (auto& v : values) {
    v = h.dtype == Dtype::float64 ? std::bit_cast<double>(in.le(8))
                                  : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(in.le(4))));
  }
  return {h, EmbeddingSet(std::move(ids), DenseMatrix(h.row_count, h.dim, std::move(values)))};
}

/// Writes ids and rows as a single-block UEMB file.
inline void write_embeddings(const std::filesystem::path& path, std::span<const std::string> ids,
                             const DenseMatrix& matrix, Dtype dtype = Dtype::float64) {
  std::string buf;
  encode_embeddings(buf, ids, matrix, dtype);
  detail::write_file_bytes(path, buf);
}

inline void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set,
                             Dtype dtype = Dtype::float64) {
  write_embeddings(path, set.ids(), set.matrix(), dtype);
}

/// Reads a single-block UEMB file. float32 payloads are widened exactly.
/// Bytes after the block are a size mismatch.
inline EmbeddingSet read_embeddings(const std::filesystem::path& path,
                                    EmbeddingFileHeader* header = nullptr) {
  const auto bytes = detail::read_file_bytes(path);
  detail::ByteReader in(bytes, path.string());
  auto [h, set] = decode_embeddings(in, path.string());
  if (in.remaining() != 0) {
    throw EmbeddingFormatError(EmbeddingFormatError::Kind::size_mismatch,
                               path.string() + ": " + std::to_string(in.remaining()) +
                                   " trailing bytes after declared payload");
  }
  if (header != nullptr) *header = h;
  return std::move(set);
}

// ---------------------------------------------------------------------------
// Checkpoints: a sequence of float64 UEMB blocks, one per tensor, in
// for_each_tensor order, followed by "adapter.alpha" (1x1) when an adapter is
// present. Row ids are "<tensor>:<row>".

inline std::string encode_checkpoint(const ToyEncoderParams& params) {
  params.validate();
  std::string out;
  auto section = [&out](std::string_view name, const DenseMatrix& m) {
    std::vector<std::string> ids;
    for (std::size_t r = 0; r < m.rows(); ++r) ids.push_back(std::string(name) + ':' + std::to_string(r));
    encode_embeddings(out, ids, m);
  };
  auto as_row = [](const RowVector& v) {
    return DenseMatrix(1, v.dim(), std::vector<double>(v.begin(), v.end()));
  };
  section("w1", params.w1);
  section("b1", as_row(params.b1));
  section("w2", params.w2);
  section("b2", as_row(params.b2));
  if (params.adapter) {
    section("adapter.a", params.adapter->a);
    section("adapter.b", params.adapter->b);
    section("adapter.alpha", DenseMatrix(1, 1, params.adapter->alpha));
  }
  return out;
}

inline void write_checkpoint(const std::filesystem::path& path, const ToyEncoderParams& params) {
  detail::write_file_bytes(path, encode_checkpoint(params));
}

inline ToyEncoderParams decode_checkpoint(std::span<const std::uint8_t> bytes, const std::string& source) {
  detail::ByteReader in(bytes, source);
  auto section = [&](std::string_view name) {
    auto [h, set] = decode_embeddings(in, source);
    for (std::size_t r = 0; r < set.size(); ++r) {
      if (set.ids()[r] != std::string(name) + ':' + std::to_string(r)) {
        throw ValidationError(source + ": expected checkpoint section '" + std::string(name) + "'");
      }
    }
    return set.matrix();
  };
  auto as_vector = [](const DenseMatrix& m) {
    if (m.rows() != 1) throw ValidationError("checkpoint: bias section must have one row");
    return RowVector(m.row(0));
  };
  ToyEncoderParams p;
  p.w1 = section("w1");
  p.b1 = as_vector(section("b1"));
  p.w2 = section("w2");
  p.b2 = as_vector(section("b2"));
  if (in.remaining() > 0) {
    LowRankAdapter ad;
    ad.a = section("adapter.a");
    ad.b = section("adapter.b");
    const auto alpha = section("adapter.alpha");
    if (alpha.rows() != 1 || alpha.cols() != 1) throw ValidationError(source + ": bad adapter.alpha");
    ad.alpha = alpha(0, 0);
    p.adapter = std::move(ad);
  }
  if (in.remaining() != 0) {
    throw EmbeddingFormatError(EmbeddingFormatError::Kind::size_mismatch,
                               source + ": trailing bytes after checkpoint");
  }
  p.validate();
  return p;
}

inline ToyEncoderParams read_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint(detail::read_file_bytes(path), path.string());
}

/// "step<TAB>loss" lines, losses printed with 17 significant digits.
inline std::string format_loss_trace(std::span<const double> losses) {
  std::string out;
  char buf[64];
  for (std::size_t i = 0; i < losses.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu\t%.17g\n", i, losses[i]);
    out += buf;
  }
  return out;
}

inline void write_loss_trace(const std::filesystem::path& path, std::span<const double> losses) {
  detail::write_file_bytes(path, format_loss_trace(losses));
}

// ---------------------------------------------------------------------------
// JSON helpers

namespace detail {

using nlohmann::json;

inline void reject_unknown_keys(const json& obj, std::initializer_list<std::string_view> allowed,
                                const std::string& where) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
      throw ValidationError(where + ": unknown field '" + it.key() + "'");
    }
  }
}

template <class T>
T get_field(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ValidationError(where + ": missing required field '" + key + "'");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw ValidationError(where + ": field '" + key + "' has the wrong type");
  }
}

template <class T>
T get_field_or(const json& obj, const char* key, T fallback, const std::string& where) {
  if (!obj.contains(key)) return fallback;
  return get_field<T>(obj, key, where);
}

inline std::filesystem::path resolve_relative(const std::filesystem::path& base_dir,
                                              const std::string& p) {
  if (p.empty()) return {};
  const std::filesystem::path path(p);
  return path.is_absolute() ? path : base_dir / path;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Task manifests (JSON lines, one task per line)

/// Parses manifest lines. Blank lines are skipped; every other problem is
/// reported with its 1-based line number. The metric must be ndcg@5 exactly
/// for visual-document (VisDoc) tasks and something else otherwise, unless the
/// line sets "metric_override": true. Relative data paths resolve against
/// `base_dir`.
inline std::vector<TaskManifest> parse_manifest_text(std::string_view text,
                                                     const std::filesystem::path& base_dir = {},
                                                     const std::string& source = "manifest") {
  std::vector<TaskManifest> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) {
      if (end == text.size()) break;
      continue;
    }
    const std::string where = source + ":" + std::to_string(line_no);
    detail::json j;
    try {
      j = detail::json::parse(line);
    } catch (const detail::json::parse_error& e) {
      throw ValidationError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    detail::reject_unknown_keys(
        j,
        {"name", "category", "group", "query_mod", "target_mod", "metric", "metric_override",
         "instruction", "target_instruction", "pool", "num_queries", "num_candidates", "queries",
         "candidates", "qrels"},
        where);
    TaskManifest m;
    try {
      m.name = detail::get_field<std::string>(j, "name", where);
      m.category = detail::get_field<std::string>(j, "category", where);
      m.group = detail::get_field_or<std::string>(j, "group", "", where);
      if (m.group.empty()) {
        auto g = default_group_of(m.category);
        if (!g) throw ValidationError(where + ": cannot infer group of category '" + m.category + "'");
        m.group = *g;
      }
      m.query_mod = Modality::parse(detail::get_field<std::string>(j, "query_mod", where));
      m.target_mod = Modality::parse(detail::get_field<std::string>(j, "target_mod", where));
      m.metric = Metric::parse(detail::get_field<std::string>(j, "metric", where));
      m.instruction = detail::get_field<std::string>(j, "instruction", where);
      m.target_instruction = detail::get_field_or<std::string>(j, "target_instruction", "", where);
      const auto pool = detail::get_field_or<std::string>(j, "pool", "shared", where);
      if (pool == "shared") {
        m.pool_mode = PoolMode::shared;
      } else if (pool == "per-query") {
        m.pool_mode = PoolMode::per_query;
      } else {
        throw ValidationError(where + ": pool must be 'shared' or 'per-query'");
      }
      m.num_queries = detail::get_field_or<std::size_t>(j, "num_queries", 0, where);
      m.num_candidates = detail::get_field_or<std::size_t>(j, "num_candidates", 0, where);
      m.queries_path = detail::resolve_relative(base_dir, detail::get_field_or<std::string>(j, "queries", "", where)).string();
      m.candidates_path = detail::resolve_relative(base_dir, detail::get_field_or<std::string>(j, "candidates", "", where)).string();
      m.qrels_path = detail::resolve_relative(base_dir, detail::get_field_or<std::string>(j, "qrels", "", where)).string();
      const bool override_metric = detail::get_field_or<bool>(j, "metric_override", false, where);
      const bool visdoc = m.group == "VisDoc";
      const bool is_ndcg5 = m.metric == Metric::ndcg_at(5);
      if (!override_metric && visdoc != is_ndcg5) {
        throw ValidationError(where + ": metric " + m.metric.name() + " does not match group " +
                              m.group + " (VisDoc tasks use ndcg@5, others hit@1); set "
                              "metric_override to keep it");
      }
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      if (msg.rfind(where, 0) == 0) throw;
      throw ValidationError(where + ": " + msg);
    }
    out.push_back(std::move(m));
    if (end == text.size()) break;
  }
  return out;
}

inline std::vector<TaskManifest> parse_manifest(const std::filesystem::path& path) {
  return parse_manifest_text(detail::read_text_file(path), path.parent_path(), path.string());
}

/// Judgement lines: {"query": id, "gold": [ids], "pool": [ids]}; "pool" is
/// only needed for per-query pools.
inline std::vector<QueryJudgement> parse_judgements_text(std::string_view text,
                                                         const std::string& source = "qrels") {
  std::vector<QueryJudgement> out;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no);
    detail::json j;
    try {
      j = detail::json::parse(line);
    } catch (const detail::json::parse_error& e) {
      throw ValidationError(where + ": invalid JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw ValidationError(where + ": expected a JSON object");
    detail::reject_unknown_keys(j, {"query", "gold", "pool"}, where);
    QueryJudgement q{detail::get_field<std::string>(j, "query", where),
                     detail::get_field<std::vector<std::string>>(j, "gold", where),
                     detail::get_field_or<std::vector<std::string>>(j, "pool", {}, where)};
    if (q.gold.empty()) throw ValidationError(where + ": empty gold list");
    out.push_back(std::move(q));
  }
  return out;
}

inline std::vector<QueryJudgement> parse_judgements(const std::filesystem::path& path) {
  return parse_judgements_text(detail::read_text_file(path), path.string());
}

// ---------------------------------------------------------------------------
// Engine configuration (JSON). Every key is optional; an empty file yields the
// defaults below. Unknown keys are rejected.

struct EncoderShape {
  std::size_t input_dim = 32;
  std::size_t hidden_dim = 64;
  std::size_t output_dim = 16;
  std::size_t adapter_rank = 16;
  double adapter_alpha = 32.0;
};

struct SourceSpec {
  std::string id;
  double weight = 1.0;
  std::string queries_path;  // UEMB, row i pairs with row i of targets
  std::string targets_path;
};

inline constexpr std::uint64_t kDefaultSeed = 20250708;

struct EngineConfig {
  std::uint64_t seed = kDefaultSeed;
  TrainConfig train;
  EncoderShape encoder;
  PromptTemplates templates;
  std::size_t frames = 8;
  /// Sampling weights by source id, used by sample-audit and when sources do
  /// not carry their own weight.
  std::map<std::string, double> weights;
  std::vector<SourceSpec> sources;

  EngineConfig() {
    train.freeze_base = true;
    train.plan.seed = seed;
  }

  void validate() const {
    train.validate();
    if (frames == 0) throw ValidationError("config: video.frames must be at least 1");
    if (encoder.input_dim == 0 || encoder.hidden_dim == 0 || encoder.output_dim == 0) {
      throw ValidationError("config: encoder dimensions must be positive");
    }
    if (!(encoder.adapter_alpha > 0.0)) throw ValidationError("config: adapter_alpha must be positive");
    if (train.freeze_base && encoder.adapter_rank == 0) {
      throw ValidationError("config: train.freeze_base requires encoder.adapter_rank > 0");
    }
    for (const auto& [id, w] : weights) {
      if (!std::isfinite(w) || w < 0.0) {
        throw ValidationError("config: weight of source '" + id + "' must be finite and non-negative");
      }
    }
    for (const auto& s : sources) {
      if (!std::isfinite(s.weight) || s.weight < 0.0) {
        throw ValidationError("config: weight of source '" + s.id + "' must be finite and non-negative");
      }
    }
  }
};

inline EngineConfig parse_config_text(std::string_view text, const std::filesystem::path& base_dir = {},
                                      const std::string& source = "config") {
  EngineConfig cfg;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) {
    cfg.validate();
    return cfg;
  }
  detail::json j;
  try {
    j = detail::json::parse(text);
  } catch (const detail::json::parse_error& e) {
    throw ValidationError(source + ": invalid JSON (" + e.what() + ")");
  }
  if (!j.is_object()) throw ValidationError(source + ": expected a JSON object");
  detail::reject_unknown_keys(j, {"seed", "loss", "sampling", "train", "encoder", "templates", "video", "sources"},
                              source);
  cfg.seed = detail::get_field_or<std::uint64_t>(j, "seed", cfg.seed, source);

  if (j.contains("loss")) {
    const auto& l = j["loss"];
    const std::string where = source + ": loss";
    detail::reject_unknown_keys(l, {"temperature", "false_negative_masking", "hard_negative_policy"}, where);
    cfg.train.loss.temperature = detail::get_field_or<double>(l, "temperature", cfg.train.loss.temperature, where);
    cfg.train.loss.false_negative_masking =
        detail::get_field_or<bool>(l, "false_negative_masking", cfg.train.loss.false_negative_masking, where);
    const auto policy = detail::get_field_or<std::string>(l, "hard_negative_policy", "pooled", where);
    if (policy == "pooled") {
      cfg.train.loss.hard_negative_policy = HardNegativePolicy::pooled;
    } else if (policy == "per-query") {
      cfg.train.loss.hard_negative_policy = HardNegativePolicy::per_query;
    } else {
      throw ValidationError(where + ": hard_negative_policy must be 'pooled' or 'per-query'");
    }
  }
  if (j.contains("sampling")) {
    const auto& s = j["sampling"];
    const std::string where = source + ": sampling";
    detail::reject_unknown_keys(s, {"full_batch", "sub_batch", "allow_replacement", "weights"}, where);
    cfg.train.plan.full_batch = detail::get_field_or<std::size_t>(s, "full_batch", cfg.train.plan.full_batch, where);
    cfg.train.plan.sub_batch = detail::get_field_or<std::size_t>(s, "sub_batch", cfg.train.plan.sub_batch, where);
    cfg.train.plan.allow_replacement =
        detail::get_field_or<bool>(s, "allow_replacement", cfg.train.plan.allow_replacement, where);
    cfg.weights = detail::get_field_or<std::map<std::string, double>>(s, "weights", {}, where);
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    const std::string where = source + ": train";
    detail::reject_unknown_keys(t, {"steps", "learning_rate", "optimizer", "chunk_size", "freeze_base"}, where);
    cfg.train.steps = detail::get_field_or<std::size_t>(t, "steps", cfg.train.steps, where);
    cfg.train.learning_rate = detail::get_field_or<double>(t, "learning_rate", cfg.train.learning_rate, where);
    cfg.train.chunk_size = detail::get_field_or<std::size_t>(t, "chunk_size", cfg.train.chunk_size, where);
    cfg.train.freeze_base = detail::get_field_or<bool>(t, "freeze_base", cfg.train.freeze_base, where);
    const auto opt = detail::get_field_or<std::string>(t, "optimizer", "adam", where);
    if (opt == "adam") {
      cfg.train.optimizer = OptimizerKind::adam;
    } else if (opt == "sgd") {
      cfg.train.optimizer = OptimizerKind::sgd;
    } else {
      throw ValidationError(where + ": optimizer must be 'adam' or 'sgd'");
    }
  }
  if (j.contains("encoder")) {
    const auto& e = j["encoder"];
    const std::string where = source + ": encoder";
    detail::reject_unknown_keys(e, {"input_dim", "hidden_dim", "output_dim", "adapter_rank", "adapter_alpha"}, where);
    cfg.encoder.input_dim = detail::get_field_or<std::size_t>(e, "input_dim", cfg.encoder.input_dim, where);
    cfg.encoder.hidden_dim = detail::get_field_or<std::size_t>(e, "hidden_dim", cfg.encoder.hidden_dim, where);
    cfg.encoder.output_dim = detail::get_field_or<std::size_t>(e, "output_dim", cfg.encoder.output_dim, where);
    cfg.encoder.adapter_rank = detail::get_field_or<std::size_t>(e, "adapter_rank", cfg.encoder.adapter_rank, where);
    cfg.encoder.adapter_alpha = detail::get_field_or<double>(e, "adapter_alpha", cfg.encoder.adapter_alpha, where);
  }
  if (j.contains("templates")) {
    const auto& t = j["templates"];
    const std::string where = source + ": templates";
    detail::reject_unknown_keys(t, {"query", "target", "tokens"}, where);
    cfg.templates.query = detail::get_field_or<std::string>(t, "query", cfg.templates.query, where);
    cfg.templates.target = detail::get_field_or<std::string>(t, "target", cfg.templates.target, where);
    if (t.contains("tokens")) {
      const auto& tok = t["tokens"];
      detail::reject_unknown_keys(tok, {"I", "V", "D"}, where + ".tokens");
      const std::pair<const char*, Modality::Component> keys[] = {
          {"I", Modality::kImage}, {"V", Modality::kVideo}, {"D", Modality::kDocument}};
      for (auto [key, comp] : keys) {
        if (tok.contains(key)) cfg.templates.tokens.tokens[comp] = detail::get_field<std::string>(tok, key, where);
      }
    }
  }
  if (j.contains("video")) {
    const auto& v = j["video"];
    detail::reject_unknown_keys(v, {"frames"}, source + ": video");
    cfg.frames = detail::get_field_or<std::size_t>(v, "frames", cfg.frames, source + ": video");
  }
  if (j.contains("sources")) {
    if (!j["sources"].is_array()) throw ValidationError(source + ": sources must be an array");
    std::size_t idx = 0;
    for (const auto& s : j["sources"]) {
      const std::string where = source + ": sources[" + std::to_string(idx++) + "]";
      detail::reject_unknown_keys(s, {"id", "weight", "queries", "targets"}, where);
      SourceSpec spec;
      spec.id = detail::get_field<std::string>(s, "id", where);
      spec.queries_path = detail::resolve_relative(base_dir, detail::get_field<std::string>(s, "queries", where)).string();
      spec.targets_path = detail::resolve_relative(base_dir, detail::get_field<std::string>(s, "targets", where)).string();
      auto w = cfg.weights.find(spec.id);
      spec.weight = detail::get_field_or<double>(s, "weight", w == cfg.weights.end() ? 1.0 : w->second, where);
      cfg.sources.push_back(std::move(spec));
    }
  }
  cfg.train.plan.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

inline EngineConfig load_config(const std::filesystem::path& path) {
  return parse_config_text(detail::read_text_file(path), path.parent_path(), path.string());
}

/// Identity of a target row for false-negative masking: its id up to the
/// first '#'. Ids in a file are unique, so "img7#0" and "img7#1" are how two
/// rows name the same underlying target.
inline std::string target_key(std::string_view id) { return std::string(id.substr(0, id.find('#'))); }

/// Loads the training sources a config names. Query rows pair with target
/// rows by position.
inline std::vector<TrainingSource> load_training_sources(const EngineConfig& cfg) {
  std::vector<TrainingSource> out;
  for (const auto& s : cfg.sources) {
    auto queries = read_embeddings(s.queries_path);
    auto targets = read_embeddings(s.targets_path);
    std::vector<std::string> keys;
    for (const auto& id : targets.ids()) keys.push_back(target_key(id));
    TrainingSource ts{s.id, s.weight, queries.matrix(), targets.matrix(), std::move(keys)};
    ts.validate();
    out.push_back(std::move(ts));
  }
  return out;
}

}  // namespace uemb
