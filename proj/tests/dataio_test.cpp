#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>

#include "test_util.hpp"
#include "uemb/dataio.hpp"

namespace uemb {
namespace {

namespace fs = std::filesystem;
using Kind = EmbeddingFormatError::Kind;

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / ("uemb_test_" + std::string(info->name()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

std::string encoded(const std::vector<std::string>& ids, const DenseMatrix& m, Dtype dtype = Dtype::float64) {
  std::string buf;
  encode_embeddings(buf, ids, m, dtype);
  return buf;
}

EmbeddingSet decoded(const std::string& bytes) {
  std::vector<std::uint8_t> raw(bytes.begin(), bytes.end());
  detail::ByteReader in(raw, "mem");
  auto set = decode_embeddings(in, "mem").second;
  if (in.remaining() != 0) throw EmbeddingFormatError(Kind::size_mismatch, "trailing");
  return set;
}

Kind failure_kind(const std::string& bytes) {
  try {
    decoded(bytes);
  } catch (const EmbeddingFormatError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error raised";
  return Kind::bad_magic;
}

TEST(Uemb, HeaderLayout) {
  const auto b = encoded({"ab"}, DenseMatrix{{1.0, 2.0}});
  ASSERT_EQ(b.size(), 20u + 4 + 2 + 16);
  EXPECT_EQ(b.substr(0, 4), "UEMB");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1);  // version
  EXPECT_EQ(static_cast<unsigned char>(b[6]), 2);  // float64
  EXPECT_EQ(static_cast<unsigned char>(b[8]), 1);  // rows
  EXPECT_EQ(static_cast<unsigned char>(b[16]), 2);  // dim
  EXPECT_EQ(static_cast<unsigned char>(b[20]), 2);  // id length
  EXPECT_EQ(b.substr(24, 2), "ab");
  double first = 0.0;
  std::memcpy(&first, b.data() + 26, 8);
  EXPECT_EQ(first, 1.0);
}

TEST(Uemb, FileRoundTripIsBitwise) {
  TempDir dir;
  Rng rng(31);
  for (auto [rows, cols] : {std::pair<std::size_t, std::size_t>{0, 0}, {0, 7}, {1, 1}, {3, 1}, {1, 64}, {17, 5}}) {
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < rows; ++i) ids.push_back(i == 0 ? "" : "id/" + std::to_string(i) + "\xce\xbb");
    auto m = testing::random_matrix(rows, cols, rng);
    if (rows * cols > 2) {
      m.values()[0] = std::numeric_limits<double>::denorm_min();
      m.values()[1] = -0.0;
    }
    const auto path = dir / "e.uemb";
    write_embeddings(path, ids, m);
    EmbeddingFileHeader h;
    const auto back = read_embeddings(path, &h);
    EXPECT_EQ(h.row_count, rows);
    EXPECT_EQ(h.dim, cols);
    EXPECT_EQ(back.ids(), ids);
    ASSERT_EQ(back.matrix().values().size(), m.values().size());
    EXPECT_EQ(std::memcmp(back.matrix().values().data(), m.values().data(), m.values().size() * 8), 0);
    // Rewriting reproduces the file byte for byte.
    write_embeddings(dir / "f.uemb", back);
    EXPECT_EQ(detail::read_file_bytes(path), detail::read_file_bytes(dir / "f.uemb"));
  }
}

TEST(Uemb, Float32WidensExactly) {
  Rng rng(32);
  DenseMatrix m(4, 3);
  for (double& v : m.values()) v = static_cast<double>(static_cast<float>(rng.normal()));
  const auto b = encoded({"a", "b", "c", "d"}, m, Dtype::float32);
  EXPECT_EQ(b.size(), 20u + 4 * 5 + 12 * 4);
  const auto back = decoded(b);
  EXPECT_EQ(back.matrix(), m);
  EXPECT_EQ(encoded(back.ids(), back.matrix(), Dtype::float32), b);
}

TEST(Uemb, DistinctErrorKinds) {
  const auto good = encoded({"a", "b"}, DenseMatrix{{1, 2}, {3, 4}});
  auto bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_EQ(failure_kind(bad_magic), Kind::bad_magic);
  auto bad_version = good;
  bad_version[4] = 9;
  EXPECT_EQ(failure_kind(bad_version), Kind::bad_version);
  auto bad_dtype = good;
  bad_dtype[6] = 3;
  EXPECT_EQ(failure_kind(bad_dtype), Kind::bad_dtype);
  EXPECT_EQ(failure_kind(good.substr(0, good.size() - 1)), Kind::truncated);
  EXPECT_EQ(failure_kind(good.substr(0, 10)), Kind::truncated);
  EXPECT_EQ(failure_kind(good + "x"), Kind::size_mismatch);
  auto dup = good;
  dup[29] = 'a';  // second id "b" -> "a"
  EXPECT_EQ(failure_kind(dup), Kind::duplicate_id);
}

TEST(Uemb, ReadErrorsNameThePath) {
  TempDir dir;
  const auto missing = dir / "nope.uemb";
  try {
    read_embeddings(missing);
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find(missing.string()), std::string::npos);
  }
  detail::write_file_bytes(dir / "bad.uemb", "UEMX");
  EXPECT_THROW(read_embeddings(dir / "bad.uemb"), EmbeddingFormatError);
}

TEST(Uemb, WriteRejectsMismatch) {
  std::string buf;
  const std::vector<std::string> ids{"a"};
  EXPECT_THROW(encode_embeddings(buf, ids, DenseMatrix(2, 2)), EmbeddingFormatError);
}

TEST(Checkpoint, RoundTripWithAndWithoutAdapter) {
  TempDir dir;
  Rng rng(33);
  for (std::size_t rank : {0u, 3u}) {
    auto p = init_toy_encoder(5, 6, 4, rng, rank, 7.0);
    if (p.adapter) p.adapter->b = testing::random_matrix(3, 4, rng);
    write_checkpoint(dir / "c.bin", p);
    const auto back = read_checkpoint(dir / "c.bin");
    EXPECT_EQ(back, p);
    EXPECT_EQ(encode_checkpoint(back), encode_checkpoint(p));
  }
  detail::write_file_bytes(dir / "short.bin", encode_checkpoint(init_toy_encoder(2, 2, 2, rng)).substr(0, 50));
  EXPECT_THROW(read_checkpoint(dir / "short.bin"), IoError);
}

TEST(LossTrace, FullPrecision) {
  const std::vector<double> l{0.1, 1.0 / 3.0};
  const auto s = format_loss_trace(l);
  EXPECT_EQ(s, "0\t0.10000000000000001\n1\t0.33333333333333331\n");
}

TEST(Manifest, ParsesVideoRetrievalTask) {
  const auto tasks = parse_manifest_text(
      R"({"name":"MSR-VTT","category":"V-RET","query_mod":"T","target_mod":"V","metric":"hit@1",)"
      R"("instruction":"Find a video that contains the following visual content:","queries":"q.uemb"})",
      "/data");
  ASSERT_EQ(tasks.size(), 1u);
  EXPECT_EQ(tasks[0].group, "Video");
  EXPECT_EQ(tasks[0].query_mod, Modality::parse("T"));
  EXPECT_EQ(tasks[0].target_mod, Modality::parse("V"));
  EXPECT_EQ(tasks[0].metric, Metric::hit_at_1());
  EXPECT_EQ(tasks[0].queries_path, "/data/q.uemb");
  EXPECT_EQ(tasks[0].pool_mode, PoolMode::shared);
}

TEST(Manifest, CompositeModalityAndPerQueryPool) {
  const auto tasks = parse_manifest_text(
      "\n"
      R"({"name":"QVHighlights","category":"V-MRET","query_mod":"T+V","target_mod":"V","metric":"hit@1",)"
      R"("instruction":"Find the clip that corresponds to the given sentence and video segment:","pool":"per-query"})"
      "\n");
  ASSERT_EQ(tasks.size(), 1u);
  EXPECT_TRUE(tasks[0].query_mod.has(Modality::kText));
  EXPECT_TRUE(tasks[0].query_mod.has(Modality::kVideo));
  EXPECT_EQ(tasks[0].pool_mode, PoolMode::per_query);
}

std::string manifest_error(const std::string& text) {
  try {
    parse_manifest_text(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(Manifest, ErrorsCarryLineNumbers) {
  const std::string ok =
      R"({"name":"a","category":"I-CLS","query_mod":"I","target_mod":"T","metric":"hit@1","instruction":"x"})";
  const std::string bad_mod =
      R"({"name":"b","category":"I-CLS","query_mod":"X","target_mod":"T","metric":"hit@1","instruction":"x"})";
  const auto msg = manifest_error(ok + "\n" + bad_mod + "\n");
  EXPECT_NE(msg.find("manifest:2"), std::string::npos) << msg;

  const std::string unknown =
      R"({"name":"a","category":"I-CLS","query_mod":"I","target_mod":"T","metric":"hit@1","instruction":"x","colour":1})";
  EXPECT_NE(manifest_error(unknown).find("colour"), std::string::npos);
  EXPECT_NE(manifest_error("{not json").find("manifest:1"), std::string::npos);
  const std::string missing = R"({"name":"a","category":"I-CLS","query_mod":"I","target_mod":"T","metric":"hit@1"})";
  EXPECT_NE(manifest_error(missing).find("instruction"), std::string::npos);
}

TEST(Manifest, MetricMustMatchGroup) {
  const std::string visdoc_hit =
      R"({"name":"ViDoRe","category":"D-VDRV1","query_mod":"T","target_mod":"D","metric":"hit@1","instruction":"x"})";
  EXPECT_FALSE(manifest_error(visdoc_hit).empty());
  const std::string image_ndcg =
      R"({"name":"N","category":"I-RET","query_mod":"T","target_mod":"I","metric":"ndcg@5","instruction":"x"})";
  EXPECT_FALSE(manifest_error(image_ndcg).empty());
  const std::string visdoc_ok =
      R"({"name":"ViDoRe","category":"D-VDRV1","query_mod":"T","target_mod":"D","metric":"ndcg@5","instruction":"x"})";
  EXPECT_EQ(parse_manifest_text(visdoc_ok)[0].group, "VisDoc");
  const std::string overridden =
      R"({"name":"N","category":"I-RET","query_mod":"T","target_mod":"I","metric":"recall@10","metric_override":true,"instruction":"x"})";
  EXPECT_EQ(parse_manifest_text(overridden)[0].metric, Metric::recall_at(10));
}

TEST(Judgements, ParseAndValidate) {
  const auto js = parse_judgements_text("{\"query\":\"q1\",\"gold\":[\"a\"]}\n\n{\"query\":\"q2\",\"gold\":[\"b\",\"c\"],\"pool\":[\"b\",\"c\",\"d\"]}\n");
  ASSERT_EQ(js.size(), 2u);
  EXPECT_EQ(js[1].gold.size(), 2u);
  EXPECT_EQ(js[1].pool.size(), 3u);
  EXPECT_THROW(parse_judgements_text("{\"query\":\"q\",\"gold\":[]}"), ValidationError);
  EXPECT_THROW(parse_judgements_text("{\"query\":\"q\",\"gold\":[\"a\"],\"x\":1}"), ValidationError);
}

TEST(Config, EmptyYieldsDefaults) {
  const auto cfg = parse_config_text("");
  EXPECT_EQ(cfg.train.loss.temperature, 0.02);
  EXPECT_TRUE(cfg.train.loss.false_negative_masking);
  EXPECT_EQ(cfg.train.plan.full_batch, 1024u);
  EXPECT_EQ(cfg.train.plan.sub_batch, 64u);
  EXPECT_EQ(cfg.train.plan.sub_batch_count(), 16u);
  EXPECT_EQ(cfg.frames, 8u);
  EXPECT_EQ(cfg.encoder.adapter_rank, 16u);
  EXPECT_EQ(cfg.encoder.adapter_alpha, 32.0);
  EXPECT_EQ(cfg.train.plan.seed, kDefaultSeed);
  EXPECT_EQ(cfg.templates.query, "Instruct: {instruction}\nQuery: {query}");
  EXPECT_EQ(parse_config_text("{}").train.steps, cfg.train.steps);
}

TEST(Config, OverridesAndRejections) {
  const auto cfg = parse_config_text(
      R"({"seed":7,"loss":{"temperature":0.05},"sampling":{"full_batch":256,"sub_batch":32,"weights":{"a":1,"b":3}},)"
      R"("video":{"frames":16},"templates":{"tokens":{"V":"<vid>"}}})");
  EXPECT_EQ(cfg.seed, 7u);
  EXPECT_EQ(cfg.train.plan.seed, 7u);
  EXPECT_EQ(cfg.train.loss.temperature, 0.05);
  EXPECT_EQ(cfg.train.plan.sub_batch_count(), 8u);
  EXPECT_EQ(cfg.weights.at("b"), 3.0);
  EXPECT_EQ(cfg.frames, 16u);
  EXPECT_EQ(cfg.templates.tokens.tokens.at(Modality::kVideo), "<vid>");

  EXPECT_THROW(parse_config_text(R"({"loss":{"temperature":0}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"loss":{"temperature":-1}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"sampling":{"weights":{"a":-1}}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"bogus":1})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"loss":{"temprature":0.1}})"), ValidationError);
  EXPECT_THROW(parse_config_text(R"({"video":{"frames":0}})"), ValidationError);
  EXPECT_THROW(parse_config_text("[1,2]"), ValidationError);
}

TEST(Config, SourcesResolveRelativeToConfig) {
  TempDir dir;
  Rng rng(34);
  const auto q = testing::random_matrix(4, 3, rng);
  write_embeddings(dir / "q.uemb", std::vector<std::string>{"0", "1", "2", "3"}, q);
  write_embeddings(dir / "t.uemb", std::vector<std::string>{"x#0", "y", "x#1", "z#0"}, q);
  std::ofstream(dir / "cfg.json") << R"({"sampling":{"weights":{"s":2}},"sources":[{"id":"s","queries":"q.uemb","targets":"t.uemb"}]})";
  const auto cfg = load_config(dir / "cfg.json");
  ASSERT_EQ(cfg.sources.size(), 1u);
  EXPECT_EQ(cfg.sources[0].weight, 2.0);
  const auto src = load_training_sources(cfg);
  EXPECT_EQ(src[0].queries, q);
  EXPECT_EQ(src[0].target_ids, (std::vector<std::string>{"x", "y", "x", "z"}));
}

}  // namespace
}  // namespace uemb
