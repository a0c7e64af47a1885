#include "trimkit/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace trimkit::inline TRIMKIT_NS {

std::string to_string(CountMode m) { return m == CountMode::total ? "total" : "non_embedding"; }

CountMode count_mode_from_string(const std::string& s) {
  if (s == "total") return CountMode::total;
  if (s == "non_embedding") return CountMode::non_embedding;
  throw std::invalid_argument("unknown count mode '" + s + "'");
}

void SearchSpace::validate() const {
  if (layer_range.first == 0 || layer_range.first > layer_range.second) {
    throw std::invalid_argument("search space: bad layer range");
  }
  if (head_choices.empty() || mlp_expansion_factors.empty() || embedding_choices.empty()) {
    throw std::invalid_argument("search space: empty choice set");
  }
  for (double f : mlp_expansion_factors) {
    if (!(f > 0)) throw std::invalid_argument("search space: expansion factors must be > 0");
  }
  if (hidden_multiple == 0) throw std::invalid_argument("search space: hidden_multiple must be > 0");
}

std::size_t snap_hidden(double factor, std::size_t embedding, std::size_t multiple) {
  const double raw = factor * static_cast<double>(embedding) / static_cast<double>(multiple);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(raw))) * multiple;
}

ModelConfig candidate_config(const SearchSpace& space, std::size_t layers, std::size_t heads, double factor,
                             std::size_t embedding) {
  ModelConfig c;
  c.num_layers = layers;
  c.num_heads = heads;
  c.num_query_groups = fit_query_groups(heads, space.query_groups);
  c.d_head = space.d_head;
  c.d_model = embedding;
  c.d_hidden = snap_hidden(factor, embedding, space.hidden_multiple);
  c.vocab_size = space.vocab;
  c.max_seq_len = space.max_seq_len;
  c.tie_embeddings = space.tie_embeddings;
  return c;
}

std::uint64_t counted_params(const ModelConfig& config, CountMode mode) {
  const auto p = count_params(config);
  return mode == CountMode::total ? p.total : p.non_embedding;
}

bool config_less(const ModelConfig& a, const ModelConfig& b) {
  return std::make_tuple(b.num_layers, a.num_heads, b.d_model, a.d_hidden, a.num_query_groups) <
         std::make_tuple(a.num_layers, b.num_heads, a.d_model, b.d_hidden, b.num_query_groups);
}

CandidateSet enumerate_candidates(const SearchSpace& space, double budget, double tolerance, CountMode mode) {
  space.validate();
  if (!(tolerance > 0 && tolerance < 1)) throw std::invalid_argument("tolerance must be in (0, 1)");
  if (!(budget > 0)) throw std::invalid_argument("budget must be > 0");
  CandidateSet set{budget, tolerance, mode, {}};
  for (std::size_t layers = space.layer_range.first; layers <= space.layer_range.second; ++layers) {
    for (auto heads : space.head_choices) {
      for (double factor : space.mlp_expansion_factors) {
        for (auto emb : space.embedding_choices) {
          const auto cfg = candidate_config(space, layers, heads, factor, emb);
          const auto count = static_cast<double>(counted_params(cfg, mode));
          if (std::abs(count - budget) > tolerance * budget) continue;
          const bool dup = std::any_of(set.candidates.begin(), set.candidates.end(),
                                       [&](const Candidate& c) { return c.config == cfg; });
          if (!dup) set.candidates.push_back({cfg, count_params(cfg), std::nullopt, {}});
        }
      }
    }
  }
  std::stable_sort(set.candidates.begin(), set.candidates.end(),
                   [](const Candidate& a, const Candidate& b) { return config_less(a.config, b.config); });
  return set;
}

namespace {

void sort_by_loss(std::vector<std::size_t>& order, const CandidateSet& set,
                  const std::vector<double>& loss) {
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (loss[a] != loss[b]) return loss[a] < loss[b];
    const auto& ca = set.candidates[a];
    const auto& cb = set.candidates[b];
    if (ca.params.total != cb.params.total) return ca.params.total < cb.params.total;
    return config_less(ca.config, cb.config);
  });
}

}  // namespace

CandidateSet rank_candidates(const Model& model, CandidateSet set, const ImportanceReport& report,
                             const BatchSource& data, std::span<const TokenBatch> eval_set,
                             const RankOptions& options) {
  if (options.train.steps == 0) throw std::invalid_argument("retrain steps must be >= 1");
  if (eval_set.empty()) throw std::invalid_argument("ranking needs an eval set");
  for (auto& c : set.candidates) {
    Model student = apply_candidate(model, c.config, report, options.prune);
    auto result = distill_loop(model, std::move(student), data, eval_set, options.distill, options.train);
    c.trajectory = result.evals;
    c.eval_loss = result.final_eval_loss();
  }
  std::vector<std::size_t> order(set.candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> loss;
  for (const auto& c : set.candidates) loss.push_back(*c.eval_loss);
  sort_by_loss(order, set, loss);
  CandidateSet ranked{set.budget, set.tolerance, set.mode, {}};
  for (auto i : order) ranked.candidates.push_back(std::move(set.candidates[i]));
  return ranked;
}

std::vector<std::size_t> ranking_at(const CandidateSet& set, std::size_t step) {
  std::vector<double> loss;
  for (const auto& c : set.candidates) {
    auto it = std::find_if(c.trajectory.begin(), c.trajectory.end(),
                           [&](const EvalPoint& p) { return p.step == step; });
    if (it == c.trajectory.end()) {
      throw std::invalid_argument("no eval recorded at step " + std::to_string(step));
    }
    loss.push_back(it->loss);
  }
  std::vector<std::size_t> order(set.candidates.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  sort_by_loss(order, set, loss);
  return order;
}

Json to_json(const SearchSpace& s) {
  return {{"layer_range", {s.layer_range.first, s.layer_range.second}},
          {"head_choices", s.head_choices},
          {"mlp_expansion_factors", s.mlp_expansion_factors},
          {"embedding_choices", s.embedding_choices},
          {"d_head", s.d_head},
          {"vocab", s.vocab},
          {"tie_embeddings", s.tie_embeddings},
          {"query_groups", s.query_groups},
          {"hidden_multiple", s.hidden_multiple},
          {"max_seq_len", s.max_seq_len}};
}

SearchSpace search_space_from_json(const Json& j) {
  SearchSpace s;
  try {
    const auto r = j.at("layer_range").get<std::vector<std::size_t>>();
    if (r.size() != 2) throw FormatError("/search/layer_range", "expected [min, max]");
    s.layer_range = {r[0], r[1]};
    s.head_choices = j.at("head_choices").get<std::vector<std::size_t>>();
    s.mlp_expansion_factors = j.at("mlp_expansion_factors").get<std::vector<double>>();
    s.embedding_choices = j.at("embedding_choices").get<std::vector<std::size_t>>();
    s.d_head = j.value("d_head", s.d_head);
    s.vocab = j.value("vocab", s.vocab);
    s.tie_embeddings = j.value("tie_embeddings", s.tie_embeddings);
    s.query_groups = j.value("query_groups", s.query_groups);
    s.hidden_multiple = j.value("hidden_multiple", s.hidden_multiple);
    s.max_seq_len = j.value("max_seq_len", s.max_seq_len);
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("/search", e.what());
  }
  return s;
}

Json to_json(const CandidateSet& set) {
  Json cands = Json::array();
  for (std::size_t i = 0; i < set.candidates.size(); ++i) {
    const auto& c = set.candidates[i];
    Json e = {{"id", i + 1},
              {"config", to_json(c.config)},
              {"params_total", c.params.total},
              {"params_non_embedding", c.params.non_embedding}};
    e["eval_loss"] = c.eval_loss ? Json(*c.eval_loss) : Json(nullptr);
    Json traj = Json::array();
    for (const auto& p : c.trajectory) traj.push_back({p.step, p.loss});
    e["trajectory"] = traj;
    cands.push_back(e);
  }
  return {{"budget", set.budget}, {"tolerance", set.tolerance}, {"count_mode", to_string(set.mode)},
          {"candidates", cands}};
}

CandidateSet candidate_set_from_json(const Json& j) {
  CandidateSet set;
  try {
    set.budget = j.at("budget").get<double>();
    set.tolerance = j.at("tolerance").get<double>();
    set.mode = count_mode_from_string(j.at("count_mode").get<std::string>());
    for (const auto& e : j.at("candidates")) {
      Candidate c;
      c.config = model_config_from_json(e.at("config"));
      c.params = count_params(c.config);
      if (e.contains("eval_loss") && !e["eval_loss"].is_null()) c.eval_loss = e["eval_loss"].get<double>();
      if (e.contains("trajectory")) {
        for (const auto& p : e["trajectory"]) c.trajectory.push_back({p.at(0).get<std::size_t>(), p.at(1).get<double>()});
      }
      set.candidates.push_back(std::move(c));
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("/candidates", e.what());
  }
  return set;
}

SearchSpace reference_8b_space() {
  SearchSpace s;
  s.layer_range = {29, 32};
  s.head_choices = {32, 48};
  s.mlp_expansion_factors = {2.5, 3, 3.5, 4};
  s.embedding_choices = {4096, 4608, 5120, 5632, 6144};
  s.d_head = 128;
  s.vocab = 256000;
  s.tie_embeddings = false;
  s.query_groups = 8;
  s.hidden_multiple = 128;
  return s;
}

}  // namespace trimkit
