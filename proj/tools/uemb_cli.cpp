#include <unistd.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "uemb.hpp"

namespace {

using namespace uemb;
using nlohmann::json;

// Flags shared by every subcommand. Unset optionals leave the config value alone.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string format;
  std::size_t threads = 1;
  std::optional<std::size_t> chunk_size;
  std::optional<std::size_t> sub_batch;
  std::optional<double> temperature;
  std::optional<std::size_t> frames;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "JSON config file (defaults apply when omitted)");
  app->add_option("--seed", c.seed, "seed for every random stream");
  app->add_option("--format", c.format, "output format; table on a terminal, json otherwise")
      ->check(CLI::IsMember({"json", "csv", "table"}));
  app->add_option("--threads", c.threads, "worker cap for evaluation")->check(CLI::PositiveNumber);
  app->add_option("--chunk-size", c.chunk_size, "gradient-cache chunk size");
  app->add_option("--sub-batch", c.sub_batch, "examples per single-source sub-batch");
  app->add_option("--temperature", c.temperature, "InfoNCE temperature");
  app->add_option("--frames", c.frames, "frames kept per video");
}

EngineConfig resolve_config(const Common& c) {
  EngineConfig cfg = c.config_path.empty() ? parse_config_text("") : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  cfg.train.plan.seed = cfg.seed;
  if (c.chunk_size) cfg.train.chunk_size = *c.chunk_size;
  if (c.sub_batch) cfg.train.plan.sub_batch = *c.sub_batch;
  if (c.temperature) cfg.train.loss.temperature = *c.temperature;
  if (c.frames) cfg.frames = *c.frames;
  cfg.validate();
  return cfg;
}

ReportFormat output_format(const Common& c) {
  if (!c.format.empty()) return parse_report_format(c.format);
  return isatty(STDOUT_FILENO) ? ReportFormat::table : ReportFormat::json_lines;
}

// Independent random streams derived from the one seed.
Rng stream(std::uint64_t seed, std::uint64_t which) { return Rng(seed + 0x9E3779B97F4A7C15ULL * which); }

enum Stream : std::uint64_t { kInitStream = 1, kDataStream = 2, kCheckStream = 3 };

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string out = "checkpoint.uemb";
  std::string trace = "loss_trace.tsv";
  std::string init;
  std::optional<std::size_t> steps;
  std::optional<std::size_t> full_batch;
  bool synthetic = false;
  std::size_t clusters = 32;
  double noise = 0.1;
};

int run_train(const Common& c, const TrainArgs& a) {
  EngineConfig cfg = resolve_config(c);
  if (a.steps) cfg.train.steps = *a.steps;
  if (a.full_batch) cfg.train.plan.full_batch = *a.full_batch;
  cfg.validate();

  std::optional<ClusterTask> task;
  std::vector<TrainingSource> sources;
  if (a.synthetic) {
    ClusterTaskOptions opt;
    opt.clusters = a.clusters;
    opt.dim = cfg.encoder.input_dim;
    opt.noise = a.noise;
    auto rng = stream(cfg.seed, kDataStream);
    task = make_cluster_task(opt, rng);
    sources = task->sources;
  } else {
    if (cfg.sources.empty()) throw ValidationError("train: config names no sources (or pass --synthetic)");
    sources = load_training_sources(cfg);
  }

  ToyEncoderParams initial;
  if (!a.init.empty()) {
    initial = read_checkpoint(a.init);
  } else {
    auto rng = stream(cfg.seed, kInitStream);
    const std::size_t rank = cfg.train.freeze_base ? cfg.encoder.adapter_rank : 0;
    initial = init_toy_encoder(cfg.encoder.input_dim, cfg.encoder.hidden_dim, cfg.encoder.output_dim, rng, rank,
                               cfg.encoder.adapter_alpha);
  }

  const auto result = train(cfg.train, sources, initial);
  write_checkpoint(a.out, result.params);
  write_loss_trace(a.trace, result.losses);

  json summary{{"steps", result.losses.size()},
               {"first_loss", result.losses.front()},
               {"final_loss", result.losses.back()},
               {"checkpoint", a.out},
               {"trace", a.trace}};
  if (task) {
    TaskManifest m;
    m.name = "synthetic-clusters";
    m.category = "synthetic";
    m.group = "synthetic";
    const EmbeddingSet q(task->heldout_queries.ids(), encode_batch(result.params, task->heldout_queries.matrix()));
    const EmbeddingSet p(task->heldout_pool.ids(), encode_batch(result.params, task->heldout_pool.matrix()));
    summary["heldout_hit@1"] = evaluate_task(m, q, p, task->judgements, c.threads).value;
  }
  if (output_format(c) == ReportFormat::table) {
    for (auto it = summary.begin(); it != summary.end(); ++it) std::cout << it.key() << ": " << it.value() << '\n';
  } else {
    std::cout << summary.dump() << '\n';
  }
  return 0;
}

// ---------------------------------------------------------------------------
// encode

struct EncodeArgs {
  std::string checkpoint;
  std::string input;
  std::string output;
  std::string dtype = "f64";
  bool video = false;
};

// Rows named "<clip>@<frame>" are frames of one clip. Keeps `frames` evenly
// spaced frames per clip and mean-pools them into one feature row.
EmbeddingSet pool_video_frames(const EmbeddingSet& in, std::size_t frames) {
  std::vector<std::string> clips;
  std::map<std::string, std::vector<std::pair<long, std::size_t>>> rows;
  for (std::size_t r = 0; r < in.size(); ++r) {
    const auto& id = in.ids()[r];
    const auto at = id.rfind('@');
    if (at == std::string::npos) throw ValidationError("encode --video: id '" + id + "' is not <clip>@<frame>");
    long frame = 0;
    try {
      frame = std::stol(id.substr(at + 1));
    } catch (const std::exception&) {
      throw ValidationError("encode --video: bad frame number in '" + id + "'");
    }
    const auto clip = id.substr(0, at);
    if (!rows.contains(clip)) clips.push_back(clip);
    rows[clip].emplace_back(frame, r);
  }
  DenseMatrix out(clips.size(), in.dim());
  for (std::size_t c = 0; c < clips.size(); ++c) {
    auto& fr = rows[clips[c]];
    std::sort(fr.begin(), fr.end());
    const auto keep = sample_frame_indices(fr.size(), std::min(frames, fr.size()));
    for (auto k : keep) {
      const auto src = in.matrix().row(fr[k].second);
      for (std::size_t d = 0; d < in.dim(); ++d) out(c, d) += src[d] / static_cast<double>(keep.size());
    }
  }
  return EmbeddingSet(std::move(clips), std::move(out));
}

int run_encode(const Common& c, const EncodeArgs& a) {
  const EngineConfig cfg = resolve_config(c);
  if (a.dtype != "f32" && a.dtype != "f64") throw ValidationError("encode: --dtype must be f32 or f64");
  const auto params = read_checkpoint(a.checkpoint);
  auto features = read_embeddings(a.input);
  if (a.video) features = pool_video_frames(features, cfg.frames);
  const EmbeddingSet out(features.ids(), encode_batch(params, features.matrix()));
  write_embeddings(a.output, out, a.dtype == "f32" ? Dtype::float32 : Dtype::float64);
  const json summary{{"rows", out.size()}, {"dim", out.dim()}, {"output", a.output}};
  std::cout << summary.dump() << '\n';
  return 0;
}

// ---------------------------------------------------------------------------
// eval and report

struct EvalArgs {
  std::vector<std::string> manifests;
  std::string output;
};

void emit(const EvalReport& rep, ReportFormat fmt, const std::string& output) {
  if (output.empty()) {
    emit_report(rep, fmt, std::cout);
    return;
  }
  std::ofstream f(output, std::ios::binary);
  if (!f) throw IoError("cannot write '" + output + "'");
  emit_report(rep, fmt, f);
}

int run_eval(const Common& c, const EvalArgs& a) {
  resolve_config(c);
  std::vector<TaskResult> results;
  std::map<std::string, std::string> groups;
  for (const auto& path : a.manifests) {
    for (const auto& m : parse_manifest(path)) {
      auto [it, fresh] = groups.emplace(m.category, m.group);
      if (!fresh && it->second != m.group) {
        throw ValidationError("category '" + m.category + "' is assigned to both " + it->second + " and " + m.group);
      }
      const auto queries = read_embeddings(m.queries_path);
      const auto candidates = read_embeddings(m.candidates_path);
      const auto judgements = parse_judgements(m.qrels_path);
      results.push_back(evaluate_task(m, queries, candidates, judgements, c.threads));
    }
  }
  emit(aggregate(std::move(results), groups), output_format(c), a.output);
  return 0;
}

struct ReportArgs {
  std::string input;
  std::string input_format = "json";
};

int run_report(const Common& c, const ReportArgs& a) {
  std::ifstream in(a.input, std::ios::binary);
  if (!in) throw IoError("cannot open '" + a.input + "'");
  const auto stored = read_report(in, parse_report_format(a.input_format));
  // Recompute the summaries so an edited task list stays consistent.
  std::map<std::string, std::string> groups;
  for (const auto& cs : stored.categories) groups[cs.name] = cs.group;
  for (const auto& t : stored.tasks) groups.emplace(t.category, t.group);
  emit(aggregate(stored.tasks, groups), output_format(c), "");
  return 0;
}

// ---------------------------------------------------------------------------
// sample-audit

struct AuditArgs {
  std::vector<std::string> weights;
  std::size_t draws = 10000;
};

int run_sample_audit(const Common& c, const AuditArgs& a) {
  EngineConfig cfg = resolve_config(c);
  std::map<std::string, double> weights = cfg.weights;
  for (const auto& w : a.weights) {
    const auto eq = w.find('=');
    if (eq == std::string::npos || eq == 0) throw ValidationError("--weights entries look like name=weight");
    try {
      weights[w.substr(0, eq)] = std::stod(w.substr(eq + 1));
    } catch (const std::exception&) {
      throw ValidationError("bad weight in '" + w + "'");
    }
  }
  for (const auto& s : cfg.sources) weights.emplace(s.id, s.weight);
  if (weights.empty()) throw ValidationError("sample-audit: no sources (use --weights or a config)");
  if (a.draws == 0) throw ValidationError("sample-audit: --draws must be at least 1");

  SourceTable table;
  const std::size_t s = cfg.train.plan.effective_sub_batch();
  for (const auto& [id, w] : weights) table.add(id, w, s);
  BatchSampler sampler(cfg.train.plan, table);
  std::vector<BatchSpec> batches;
  std::size_t drawn = 0;
  while (drawn < a.draws) {
    auto b = sampler.next();
    if (b.sub_batches.size() > a.draws - drawn) b.sub_batches.resize(a.draws - drawn);
    drawn += b.sub_batches.size();
    batches.push_back(std::move(b));
  }
  const auto freq = source_frequency_report(batches, &table);
  const auto chi = chi_square_against_table(source_draw_counts(batches), table);

  const double total = table.total_weight();
  const double n = static_cast<double>(drawn);
  const auto fmt = output_format(c);
  if (fmt == ReportFormat::csv) std::cout << "source,weight,expected,observed,band_low,band_high,within\n";
  if (fmt == ReportFormat::table) std::cout << "source        weight  expected  observed  3-sigma band\n";
  for (const auto& e : table.entries()) {
    const double p = e.weight / total;
    const double band = 3.0 * std::sqrt(p * (1.0 - p) / n);
    const double f = freq.at(e.id);
    const bool within = std::abs(f - p) <= band;
    char buf[160];
    switch (fmt) {
      case ReportFormat::json_lines:
        std::cout << json{{"source", e.id}, {"weight", e.weight}, {"expected", p}, {"observed", f},
                          {"band_low", p - band}, {"band_high", p + band}, {"within", within}}
                         .dump()
                  << '\n';
        break;
      case ReportFormat::csv:
        std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%.17g,%.17g,%.17g,%s\n", e.weight, p, f, p - band, p + band,
                      within ? "true" : "false");
        std::cout << e.id << buf;
        break;
      case ReportFormat::table:
        std::snprintf(buf, sizeof buf, "%-12s %7.3f  %8.4f  %8.4f  [%.4f, %.4f]%s\n", e.id.c_str(), e.weight, p, f,
                      p - band, p + band, within ? "" : "  OUTSIDE");
        std::cout << buf;
        break;
    }
  }
  if (fmt == ReportFormat::json_lines) {
    std::cout << json{{"draws", drawn}, {"chi_square", chi.statistic}, {"dof", chi.degrees_of_freedom},
                      {"p_value", chi.p_value}}
                     .dump()
              << '\n';
  } else if (fmt == ReportFormat::table) {
    std::printf("draws %zu, chi-square %.3f on %zu dof, p = %.4f\n", drawn, chi.statistic, chi.degrees_of_freedom,
                chi.p_value);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// selftest

ContrastiveBatch random_batch(Rng& rng, std::size_t b, std::size_t d) {
  ContrastiveBatch cb{DenseMatrix(b, d), DenseMatrix(b, d), {}, {}, {}, {}};
  for (double& v : cb.queries.values()) v = rng.normal();
  for (double& v : cb.targets.values()) v = rng.normal();
  for (std::size_t i = 0; i < b; ++i) cb.positive_index.push_back(i);
  return cb;
}

double loss_fd_error(Rng& rng, double tau) {
  auto batch = random_batch(rng, 2 + rng.below(7), 2 + rng.below(15));
  const LossConfig cfg{tau, true, HardNegativePolicy::pooled};
  const auto out = info_nce_backward(batch, cfg);
  double worst = 0.0;
  auto probe = [&](DenseMatrix& m, const DenseMatrix& grad) {
    for (std::size_t k = 0; k < m.values().size(); ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(m.values()[k]));
      const double saved = m.values()[k];
      m.values()[k] = saved + h;
      const double up = info_nce_forward(batch, cfg);
      m.values()[k] = saved - h;
      const double down = info_nce_forward(batch, cfg);
      m.values()[k] = saved;
      const double fd = (up - down) / (2 * h);
      const double a = grad.values()[k];
      worst = std::max(worst, std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-3}));
    }
  };
  probe(batch.queries, out.d_query);
  probe(batch.targets, out.d_target);
  return worst;
}

int run_selftest(const Common& c) {
  const EngineConfig cfg = resolve_config(c);
  auto rng = stream(cfg.seed, kCheckStream);
  std::vector<std::pair<std::string, bool>> checks;

  double fd = 0.0;
  for (int i = 0; i < 30; ++i) fd = std::max(fd, loss_fd_error(rng, (i % 3 == 0) ? 1.0 : (i % 3 == 1) ? 0.1 : 0.02));
  checks.emplace_back("loss gradient vs finite differences", fd < 1e-5);

  bool closed = true;
  for (std::size_t k : {2u, 4u, 16u}) {
    ContrastiveBatch b{DenseMatrix(1, 2, 0.0), DenseMatrix(k, 2, 0.0), {0}, {}, {}, {}};
    b.queries(0, 0) = 1.0;
    for (std::size_t j = 0; j < k; ++j) b.targets(j, 1) = 1.0;
    closed = closed && std::abs(info_nce_forward(b, {1.0, false, HardNegativePolicy::pooled}) - std::log(double(k))) < 1e-12;
  }
  checks.emplace_back("closed-form loss values", closed);

  auto params = init_toy_encoder(6, 10, 5, rng, 3, 6.0);
  for (double& v : params.adapter->b.values()) v = 0.2 * rng.normal();
  FeatureBatch fb{DenseMatrix(14, 6), DenseMatrix(14, 6), {}, {}, {}};
  for (double& v : fb.query_features.values()) v = rng.normal();
  for (double& v : fb.target_features.values()) v = rng.normal();
  for (std::size_t i = 0; i < 14; ++i) fb.positive_index.push_back(i);
  const auto full = grad_cache_run(ToyEncoder(params), fb, 14, cfg.train.loss);
  bool cache_ok = true;
  for (std::size_t chunk : {1u, 2u, 7u}) {
    const auto part = grad_cache_run(ToyEncoder(params), fb, chunk, cfg.train.loss);
    cache_ok = cache_ok && std::abs(part.loss - full.loss) < 1e-12;
    auto a = part.gradients;
    auto b = full.gradients;
    std::vector<std::span<double>> bs;
    for_each_tensor(b, [&](std::string_view, std::span<double> s) { bs.push_back(s); });
    std::size_t t = 0;
    for_each_tensor(a, [&](std::string_view, std::span<double> s) {
      for (std::size_t k = 0; k < s.size(); ++k) {
        cache_ok = cache_ok && std::abs(s[k] - bs[t][k]) <= 1e-9 * std::max({std::abs(s[k]), std::abs(bs[t][k]), 1e-12});
      }
      ++t;
    });
  }
  checks.emplace_back("gradient cache matches full batch", cache_ok);

  const Ranking r{{"a", 0.9}, {"g", 0.8}, {"b", 0.7}, {"h", 0.6}, {"c", 0.5}};
  const double expect = (1 / std::log2(3.0) + 1 / std::log2(5.0)) / (1 + 1 / std::log2(3.0));
  checks.emplace_back("ndcg@5 worked example", std::abs(ndcg_at_k(r, {"g", "h"}, 5) - expect) < 1e-12 &&
                                                   hit_at_1(r, {"a"}) == 1.0 && hit_at_1(r, {"g"}) == 0.0);

  SourceTable table;
  table.add("a", 1.0, 64);
  table.add("b", 3.0, 64);
  BatchSampler sampler(SamplingPlan{1024, 64, cfg.seed, false}, table);
  std::vector<BatchSpec> batches;
  bool purity = true;
  for (int i = 0; i < 200; ++i) {
    batches.push_back(sampler.next());
    purity = purity && batches.back().sub_batches.size() == 16;
  }
  const auto chi = chi_square_against_table(source_draw_counts(batches), table);
  checks.emplace_back("sampler batch layout and weights", purity && chi.p_value > 0.001);

  bool ok = true;
  const auto fmt = output_format(c);
  for (const auto& [name, pass] : checks) {
    ok = ok && pass;
    if (fmt == ReportFormat::table) {
      std::cout << (pass ? "PASS  " : "FAIL  ") << name << '\n';
    } else {
      std::cout << json{{"check", name}, {"pass", pass}}.dump() << '\n';
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Train, evaluate and audit unified multimodal embedding models"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  Common common;
  TrainArgs train_args;
  EncodeArgs encode_args;
  EvalArgs eval_args;
  ReportArgs report_args;
  AuditArgs audit_args;

  auto* train_cmd = app.add_subcommand("train", "train the toy encoder; writes a checkpoint and a loss trace");
  add_common(train_cmd, common);
  train_cmd->add_option("--out", train_args.out, "checkpoint path")->capture_default_str();
  train_cmd->add_option("--trace", train_args.trace, "loss trace path")->capture_default_str();
  train_cmd->add_option("--init", train_args.init, "start from this checkpoint");
  train_cmd->add_option("--steps", train_args.steps, "optimizer steps");
  train_cmd->add_option("--full-batch", train_args.full_batch, "examples per step");
  train_cmd->add_flag("--synthetic", train_args.synthetic, "train on a generated latent-cluster task");
  train_cmd->add_option("--clusters", train_args.clusters, "clusters in the synthetic task")->capture_default_str();
  train_cmd->add_option("--noise", train_args.noise, "noise sd in the synthetic task")->capture_default_str();

  auto* encode_cmd = app.add_subcommand("encode", "embed feature rows with a trained checkpoint");
  add_common(encode_cmd, common);
  encode_cmd->add_option("--checkpoint", encode_args.checkpoint, "trained checkpoint")->required();
  encode_cmd->add_option("--input", encode_args.input, "feature rows (UEMB)")->required();
  encode_cmd->add_option("--output", encode_args.output, "embedding output (UEMB)")->required();
  encode_cmd->add_option("--dtype", encode_args.dtype, "f32 or f64")->capture_default_str();
  encode_cmd->add_flag("--video", encode_args.video, "rows are <clip>@<frame>; keep --frames frames per clip");

  auto* eval_cmd = app.add_subcommand("eval", "score embeddings against task manifests");
  add_common(eval_cmd, common);
  eval_cmd->add_option("manifests", eval_args.manifests, "task manifest files (JSON lines)")->required();
  eval_cmd->add_option("--output", eval_args.output, "write the report here instead of stdout");

  auto* report_cmd = app.add_subcommand("report", "re-render a stored evaluation report");
  add_common(report_cmd, common);
  report_cmd->add_option("input", report_args.input, "stored report")->required();
  report_cmd->add_option("--input-format", report_args.input_format, "json or csv")
      ->check(CLI::IsMember({"json", "csv"}))
      ->capture_default_str();

  auto* audit_cmd = app.add_subcommand("sample-audit", "draw sub-batches and compare source frequencies to weights");
  add_common(audit_cmd, common);
  audit_cmd->add_option("--weights", audit_args.weights, "source weights as name=weight")->delimiter(',');
  audit_cmd->add_option("--draws", audit_args.draws, "sub-batch draws")->capture_default_str();

  auto* selftest_cmd = app.add_subcommand("selftest", "run gradient, cache, metric and sampler checks");
  add_common(selftest_cmd, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return run_train(common, train_args);
    if (*encode_cmd) return run_encode(common, encode_args);
    if (*eval_cmd) return run_eval(common, eval_args);
    if (*report_cmd) return run_report(common, report_args);
    if (*audit_cmd) return run_sample_audit(common, audit_args);
    if (*selftest_cmd) return run_selftest(common);
  } catch (const uemb::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
