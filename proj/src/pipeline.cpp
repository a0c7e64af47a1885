#include "trimkit/pipeline.hpp"

#include <memory>
#include <random>
#include <set>

namespace trimkit::inline TRIMKIT_NS {

BatchSource window_source(const TokenDataset& ds, Split split, std::size_t batch, std::size_t seq_len,
                          std::uint64_t seed) {
  auto starts = std::make_shared<std::vector<std::size_t>>();
  for (const auto& d : ds.documents) {
    if (d.split != split) continue;
    for (std::size_t s = d.begin; s + seq_len <= d.end; ++s) starts->push_back(s);
  }
  if (starts->empty()) throw DatasetError("no window of " + std::to_string(seq_len) + " tokens in split");
  return [&ds, starts, batch, seq_len, seed](std::size_t step) {
    std::mt19937_64 rng(splitmix64(seed ^ splitmix64(step + 1)));
    std::uniform_int_distribution<std::size_t> pick(0, starts->size() - 1);
    TokenBatch out{batch, seq_len, {}};
    out.ids.reserve(batch * seq_len);
    for (std::size_t b = 0; b < batch; ++b) {
      const auto s = (*starts)[pick(rng)];
      out.ids.insert(out.ids.end(), ds.ids.begin() + s, ds.ids.begin() + s + seq_len);
    }
    return out;
  };
}

bool PipelineConfig::operator==(const PipelineConfig& o) const { return to_json(*this) == to_json(o); }

Json to_json(const PipelineConfig& c) {
  Json j;
  j["model"] = to_json(c.model);
  j["train"] = to_json(c.train);
  j["distill"] = to_json(c.distill);
  j["distill_defaults"] = c.distill_defaults;
  j["agg"] = to_json(c.agg);
  j["calib_samples"] = c.calib_samples;
  j["eval_batches"] = c.eval_batches;
  j["prune"] = {{"depth_metric", c.prune.depth_metric == DepthMetric::bi ? "bi" : "ppl"},
                {"merge_residual_heads", c.prune.merge_residual_heads}};
  if (c.search) j["search"] = to_json(*c.search);
  j["budget"] = c.budget;
  j["tolerance"] = c.tolerance;
  j["count_mode"] = to_string(c.count_mode);
  j["search_retrain_steps"] = c.search_retrain_steps;
  return j;
}

PipelineConfig pipeline_config_from_json(const Json& j) {
  if (!j.is_object()) throw FormatError("/", "expected an object");
  static const std::set<std::string> known = {
      "model", "train", "distill", "distill_defaults", "agg", "calib_samples", "eval_batches", "prune",
      "search", "budget", "tolerance", "count_mode", "search_retrain_steps"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw FormatError("/" + key, "unknown field");
  }
  PipelineConfig c;
  if (j.contains("model")) c.model = model_config_from_json(j["model"]);
  if (j.contains("train")) c.train = train_config_from_json(j["train"]);
  if (j.contains("distill")) c.distill = distill_config_from_json(j["distill"]);
  if (j.contains("agg")) c.agg = aggregation_from_json(j["agg"]);
  try {
    c.distill_defaults = j.value("distill_defaults", c.distill_defaults);
    c.calib_samples = j.value("calib_samples", c.calib_samples);
    c.eval_batches = j.value("eval_batches", c.eval_batches);
    c.budget = j.value("budget", c.budget);
    c.tolerance = j.value("tolerance", c.tolerance);
    c.search_retrain_steps = j.value("search_retrain_steps", c.search_retrain_steps);
    if (j.contains("count_mode")) c.count_mode = count_mode_from_string(j["count_mode"].get<std::string>());
    if (j.contains("prune")) {
      const auto& p = j["prune"];
      const auto metric = p.value("depth_metric", std::string("bi"));
      if (metric != "bi" && metric != "ppl") throw FormatError("/prune/depth_metric", "expected bi or ppl");
      c.prune.depth_metric = metric == "bi" ? DepthMetric::bi : DepthMetric::ppl;
      c.prune.merge_residual_heads = p.value("merge_residual_heads", false);
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("/", e.what());
  }
  if (j.contains("search")) c.search = search_space_from_json(j["search"]);
  return c;
}

void apply_override(Json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw FormatError(assignment, "override must be key.path=value");
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value;
  try {
    value = Json::parse(text);
  } catch (const std::exception&) {
    value = text;
  }
  Json* node = &doc;
  std::size_t pos = 0;
  while (true) {
    const auto dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw FormatError(path, "empty key in override");
    if (!node->is_object()) throw FormatError(path, "not an object at '" + key + "'");
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    pos = dot + 1;
  }
}

}  // namespace trimkit
