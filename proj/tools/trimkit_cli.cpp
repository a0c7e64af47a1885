// trimkit command-line driver: data | train | importance | search | prune | distill | eval
#include <CLI11.hpp>

#include <fstream>
#include <iostream>

#include "trimkit/checkpoint.hpp"
#include "trimkit/pipeline.hpp"
#include "trimkit/pruner.hpp"

using namespace trimkit;

namespace {

enum ExitCode : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kShape = 5,
  kDiverged = 6,
};

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string metrics;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--config", c.config, "experiment config (JSON)");
  cmd->add_option("--set", c.overrides, "override, e.g. train.steps=100");
  cmd->add_option("--seed", c.seed, "seed (overrides train.seed)");
  auto* out = cmd->add_option("--out", c.out, "output path");
  if (needs_out) out->required();
  cmd->add_option("--metrics", c.metrics, "JSONL metrics file");
}

PipelineConfig load_config(const Common& c) {
  Json doc = Json::object();
  if (!c.config.empty()) {
    doc = parse_json(read_file(c.config), c.config);
  }
  for (const auto& o : c.overrides) apply_override(doc, o);
  auto cfg = pipeline_config_from_json(doc);
  if (c.seed) cfg.train.seed = *c.seed;
  return cfg;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path, std::ios::trunc);
    if (!out_) throw DatasetError("cannot write metrics to '" + path + "'");
  }
  void write(const Json& record) {
    if (out_.is_open()) out_ << record.dump() << '\n' << std::flush;
  }
  MetricsSink sink(const std::string& phase) {
    if (!out_.is_open()) return {};
    return [this, phase](const StepMetrics& m) {
      Json j = to_json(m);
      j["phase"] = phase;
      write(j);
    };
  }

 private:
  std::ofstream out_;
};

void write_json(const std::string& path, const Json& j) { write_file_atomic(path, j.dump(1) + "\n"); }

std::vector<TokenBatch> eval_set(const TokenDataset& ds, const PipelineConfig& cfg) {
  return fixed_batches(ds, Split::val, cfg.eval_batches, cfg.train.batch_size, cfg.train.seq_len,
                       cfg.train.seed ^ 0x5eedULL);
}

std::vector<TokenBatch> calibration(const TokenDataset& ds, const PipelineConfig& cfg) {
  return {sample_calibration(ds, Split::train, cfg.calib_samples, cfg.train.seq_len, cfg.train.seed)};
}

void log_evals(MetricsWriter& mw, const TrainResult& r, const std::string& phase) {
  for (const auto& e : r.evals) mw.write({{"phase", phase}, {"eval_step", e.step}, {"eval_loss", e.loss}});
}

int run(int argc, char** argv) {
  CLI::App app{"Structured pruning and distillation toolkit"};
  app.require_subcommand(1);

  Common common;

  auto* data = app.add_subcommand("data", "build a token dataset (byte-level text or synthetic bigram)");
  std::string text_path;
  std::size_t bigram_vocab = 256, bigram_branching = 4, bigram_docs = 400, bigram_len = 512;
  double val_fraction = 0.1;
  data->add_option("--text", text_path, "UTF-8 text file; documents separated by blank lines");
  data->add_option("--bigram-vocab", bigram_vocab);
  data->add_option("--bigram-branching", bigram_branching);
  data->add_option("--bigram-docs", bigram_docs);
  data->add_option("--bigram-len", bigram_len);
  data->add_option("--val-fraction", val_fraction);
  add_common(data, common, true);

  auto* train = app.add_subcommand("train", "train a model from scratch with L_CLM");
  std::string data_stem;
  train->add_option("--data", data_stem, "dataset stem")->required();
  add_common(train, common, true);

  auto* importance = app.add_subcommand("importance", "emit an importance report");
  std::string model_path;
  importance->add_option("--model", model_path)->required();
  importance->add_option("--data", data_stem)->required();
  bool with_ppl = false;
  importance->add_flag("--ppl", with_ppl, "also score layers by perplexity");
  add_common(importance, common, true);

  auto* search = app.add_subcommand("search", "enumerate (and optionally rank) candidates");
  std::string report_path;
  bool rank = false;
  search->add_option("--model", model_path);
  search->add_option("--report", report_path);
  search->add_option("--data", data_stem);
  search->add_flag("--rank", rank, "retrain every candidate and rank by eval loss");
  add_common(search, common, true);

  auto* prune = app.add_subcommand("prune", "trim a checkpoint to a target config");
  std::string manifest_path, target_path;
  std::size_t candidate_id = 1;
  prune->add_option("--model", model_path)->required();
  prune->add_option("--report", report_path)->required();
  prune->add_option("--manifest", manifest_path, "candidate manifest from `search`");
  prune->add_option("--candidate", candidate_id, "1-based candidate id in the manifest");
  prune->add_option("--target", target_path, "target model config JSON (instead of a manifest)");
  add_common(prune, common, true);

  auto* distill = app.add_subcommand("distill", "retrain a student against a teacher");
  std::string teacher_path, student_path;
  distill->add_option("--teacher", teacher_path)->required();
  distill->add_option("--student", student_path)->required();
  distill->add_option("--data", data_stem)->required();
  add_common(distill, common, true);

  auto* eval = app.add_subcommand("eval", "LM loss / perplexity on a split");
  std::string split_name = "val";
  eval->add_option("--model", model_path)->required();
  eval->add_option("--data", data_stem)->required();
  eval->add_option("--split", split_name);
  add_common(eval, common, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const PipelineConfig cfg = load_config(common);
  MetricsWriter mw(common.metrics);

  if (data->parsed()) {
    const auto ds = text_path.empty()
                        ? make_bigram_corpus(bigram_vocab, bigram_branching, bigram_docs, bigram_len,
                                             cfg.train.seed, val_fraction)
                        : ingest_text_file(text_path, cfg.train.seed, val_fraction);
    save_dataset(ds, common.out);
    std::cout << Json{{"tokens", ds.ids.size()}, {"documents", ds.documents.size()},
                      {"train_tokens", ds.tokens(Split::train)}, {"val_tokens", ds.tokens(Split::val)}}
                     .dump()
              << "\n";
  } else if (train->parsed()) {
    const auto ds = load_dataset(data_stem);
    if (ds.vocab_size != cfg.model.vocab_size) {
      throw ConfigError("model.vocab_size " + std::to_string(cfg.model.vocab_size) + " != dataset vocab " +
                        std::to_string(ds.vocab_size));
    }
    auto model = build_model(cfg.model, cfg.train.seed);
    const auto ev = eval_set(ds, cfg);
    auto result = conventional_loop(std::move(model),
                                    window_source(ds, Split::train, cfg.train.batch_size, cfg.train.seq_len,
                                                  cfg.train.seed),
                                    ev, cfg.train, mw.sink("train"));
    log_evals(mw, result, "train");
    save_checkpoint(result.student, common.out);
    std::cout << Json{{"eval_loss", result.final_eval_loss()}}.dump() << "\n";
  } else if (importance->parsed()) {
    const auto model = load_checkpoint(model_path);
    const auto ds = load_dataset(data_stem);
    ImportanceOptions opts;
    opts.agg = cfg.agg;
    opts.ppl = with_ppl || cfg.prune.depth_metric == DepthMetric::ppl;
    const auto report = compute_importance(model, calibration(ds, cfg), opts);
    write_json(common.out, to_json(report));
  } else if (search->parsed()) {
    if (!cfg.search) throw FormatError("/search", "config has no search space");
    auto set = enumerate_candidates(*cfg.search, cfg.budget, cfg.tolerance, cfg.count_mode);
    if (set.candidates.empty()) std::cerr << "warning: no candidate within the budget tolerance\n";
    if (rank && !set.candidates.empty()) {
      if (model_path.empty() || report_path.empty() || data_stem.empty()) {
        throw FormatError("--rank", "ranking needs --model, --report and --data");
      }
      const auto model = load_checkpoint(model_path);
      const auto report = importance_report_from_json(parse_json(read_file(report_path), report_path));
      const auto ds = load_dataset(data_stem);
      RankOptions ro;
      ro.prune = cfg.prune;
      ro.distill = cfg.distill;
      ro.train = cfg.train;
      ro.train.steps = cfg.search_retrain_steps;
      if (ro.train.eval_every == 0) ro.train.eval_every = std::max<std::size_t>(1, ro.train.steps / 4);
      const auto ev = eval_set(ds, cfg);
      set = rank_candidates(model, std::move(set), report,
                            window_source(ds, Split::train, cfg.train.batch_size, cfg.train.seq_len,
                                          cfg.train.seed),
                            ev, ro);
      for (std::size_t i = 0; i < set.candidates.size(); ++i) {
        mw.write({{"phase", "search"}, {"rank", i + 1}, {"config", to_json(set.candidates[i].config)},
                  {"eval_loss", *set.candidates[i].eval_loss}});
      }
    }
    Json manifest = to_json(set);
    manifest["space"] = to_json(*cfg.search);
    write_json(common.out, manifest);
    std::cout << Json{{"candidates", set.candidates.size()}}.dump() << "\n";
  } else if (prune->parsed()) {
    const auto model = load_checkpoint(model_path);
    const auto report = importance_report_from_json(parse_json(read_file(report_path), report_path));
    ModelConfig target;
    if (!manifest_path.empty()) {
      const auto set = candidate_set_from_json(parse_json(read_file(manifest_path), manifest_path));
      if (candidate_id == 0 || candidate_id > set.candidates.size()) {
        throw FormatError("--candidate", "no candidate " + std::to_string(candidate_id) + " in manifest");
      }
      target = set.candidates[candidate_id - 1].config;
    } else if (!target_path.empty()) {
      target = model_config_from_json(parse_json(read_file(target_path), target_path));
    } else {
      target = cfg.model;
    }
    const auto pruned = apply_candidate(model, target, report, cfg.prune);
    save_checkpoint(pruned, common.out);
    std::cout << Json{{"params_total", count_params(pruned.config).total}}.dump() << "\n";
  } else if (distill->parsed()) {
    const auto teacher = load_checkpoint(teacher_path);
    auto student = load_checkpoint(student_path);
    const auto ds = load_dataset(data_stem);
    DistillConfig dc = cfg.distill;
    if (cfg.distill_defaults && dc.is_components.empty()) {
      const auto d = default_distill_config(teacher.config, student.config);
      dc.is_components = d.is_components;
      dc.layer_map = d.layer_map;
    }
    const auto ev = eval_set(ds, cfg);
    auto result = distill_loop(teacher, std::move(student),
                               window_source(ds, Split::train, cfg.train.batch_size, cfg.train.seq_len,
                                             cfg.train.seed),
                               ev, dc, cfg.train, std::nullopt, mw.sink("distill"));
    log_evals(mw, result, "distill");
    save_checkpoint(result.student, common.out);
    std::cout << Json{{"eval_loss", result.final_eval_loss()}}.dump() << "\n";
  } else if (eval->parsed()) {
    const auto model = load_checkpoint(model_path);
    const auto ds = load_dataset(data_stem);
    const auto split = split_from_string(split_name);
    const auto batches = fixed_batches(ds, split, cfg.eval_batches, cfg.train.batch_size, cfg.train.seq_len,
                                       cfg.train.seed ^ 0x5eedULL);
    const auto r = evaluate(model, batches);
    Json j = {{"split", split_name}, {"lm_loss", r.mean_nll}, {"perplexity", r.perplexity()},
              {"tokens", r.tokens}};
    mw.write(j);
    if (!common.out.empty()) write_json(common.out, j);
    std::cout << j.dump() << "\n";
  }
  return kOk;
}

int fail(int code, const std::string& kind, const std::string& message, const std::string& field = {}) {
  Json j = {{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  std::cerr << j.dump() << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const FormatError& e) {
    return fail(kConfig, "config_error", e.what(), e.field);
  } catch (const CheckpointError& e) {
    return fail(kIo, "checkpoint_error", e.what(), e.field);
  } catch (const DatasetError& e) {
    return fail(kIo, "data_error", e.what());
  } catch (const FileError& e) {
    return fail(kIo, "file_error", e.what());
  } catch (const DivergenceError& e) {
    return fail(kDiverged, "divergence", e.what());
  } catch (const ConfigError& e) {
    return fail(kShape, "shape_conflict", e.what());
  } catch (const ShapeError& e) {
    return fail(kShape, "shape_conflict", e.what());
  } catch (const DistillError& e) {
    return fail(kConfig, "config_error", e.what());
  } catch (const std::invalid_argument& e) {
    return fail(kShape, "invalid_argument", e.what());
  } catch (const std::exception& e) {
    return fail(kInternal, "internal_error", e.what());
  }
}
