#include "trimkit/serialize.hpp"

#include <set>

namespace trimkit::inline TRIMKIT_NS {

namespace {

void reject_unknown(const Json& j, const std::string& where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw FormatError(where, "expected an object");
  const std::set<std::string> names(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!names.count(key)) throw FormatError(where + "/" + key, "unknown field");
  }
}

template <typename T>
void read(const Json& j, const std::string& where, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const std::exception& e) {
    throw FormatError(where + "/" + key, e.what());
  }
}

std::vector<std::vector<double>> nested(const Json& j, const char* key) {
  return j.contains(key) ? j.at(key).get<std::vector<std::vector<double>>>()
                         : std::vector<std::vector<double>>{};
}

}  // namespace

Json parse_json(const std::string& text, const std::string& what) {
  try {
    return Json::parse(text);
  } catch (const std::exception& e) {
    throw FormatError(what, e.what());
  }
}

Json to_json(const ModelConfig& c) {
  return {{"num_layers", c.num_layers},     {"d_model", c.d_model},
          {"num_heads", c.num_heads},       {"num_query_groups", c.num_query_groups},
          {"d_head", c.d_head},             {"d_hidden", c.d_hidden},
          {"vocab_size", c.vocab_size},     {"max_seq_len", c.max_seq_len},
          {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig model_config_from_json(const Json& j) {
  const std::string w = "/model";
  reject_unknown(j, w, {"num_layers", "d_model", "num_heads", "num_query_groups", "d_head", "d_hidden",
                        "vocab_size", "max_seq_len", "tie_embeddings"});
  ModelConfig c;
  read(j, w, "num_layers", c.num_layers);
  read(j, w, "d_model", c.d_model);
  read(j, w, "num_heads", c.num_heads);
  read(j, w, "num_query_groups", c.num_query_groups);
  read(j, w, "d_head", c.d_head);
  read(j, w, "d_hidden", c.d_hidden);
  read(j, w, "vocab_size", c.vocab_size);
  read(j, w, "max_seq_len", c.max_seq_len);
  read(j, w, "tie_embeddings", c.tie_embeddings);
  return c;
}

Json to_json(const DistillConfig& c) {
  Json comps = Json::array();
  for (auto s : c.is_components) comps.push_back(to_string(s));
  Json map = Json::array();
  for (auto p : c.layer_map) map.push_back(std::to_string(p.teacher) + ":" + std::to_string(p.student));
  Json j = {{"use_logits", c.use_logits},
            {"logit_loss", to_string(c.logit_loss)},
            {"temperature", c.temperature},
            {"top_k", c.top_k ? Json(*c.top_k) : Json(nullptr)},
            {"use_clm", c.use_clm},
            {"is_components", comps},
            {"layer_map", map},
            {"is_loss", to_string(c.is_loss)}};
  j["alpha"] = c.alpha.dynamic ? Json("dynamic") : Json(c.alpha.constant);
  return j;
}

DistillConfig distill_config_from_json(const Json& j) {
  const std::string w = "/distill";
  reject_unknown(j, w, {"use_logits", "logit_loss", "temperature", "top_k", "use_clm", "is_components",
                        "layer_map", "is_loss", "alpha"});
  DistillConfig c;
  read(j, w, "use_logits", c.use_logits);
  read(j, w, "temperature", c.temperature);
  read(j, w, "use_clm", c.use_clm);
  try {
    if (j.contains("logit_loss")) c.logit_loss = logit_loss_from_string(j["logit_loss"].get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError(w + "/logit_loss", e.what());
  }
  try {
    if (j.contains("is_loss")) c.is_loss = state_loss_from_string(j["is_loss"].get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError(w + "/is_loss", e.what());
  }
  if (j.contains("top_k") && !j["top_k"].is_null()) {
    std::size_t k = 0;
    read(j, w, "top_k", k);
    c.top_k = k;
  }
  if (j.contains("is_components")) {
    try {
      for (const auto& s : j["is_components"]) c.is_components.push_back(state_component_from_string(s.get<std::string>()));
    } catch (const std::exception& e) {
      throw FormatError(w + "/is_components", e.what());
    }
  }
  if (j.contains("layer_map")) {
    for (const auto& s : j["layer_map"]) {
      const std::string text = s.is_string() ? s.get<std::string>() : "";
      const auto colon = text.find(':');
      try {
        if (colon == std::string::npos) throw std::invalid_argument("expected 'teacher:student'");
        std::size_t used_t = 0, used_s = 0;
        const auto t = std::stoul(text.substr(0, colon), &used_t);
        const auto st = std::stoul(text.substr(colon + 1), &used_s);
        if (used_t != colon || used_s != text.size() - colon - 1) throw std::invalid_argument("trailing characters");
        c.layer_map.push_back({t, st});
      } catch (const std::exception& e) {
        throw FormatError(w + "/layer_map", "bad pair '" + text + "': " + e.what());
      }
    }
  }
  if (j.contains("alpha")) {
    const auto& a = j["alpha"];
    if (a.is_string() && a.get<std::string>() == "dynamic") {
      c.alpha = AlphaMode{};
    } else if (a.is_number()) {
      c.alpha = AlphaMode::fixed(a.get<double>());
    } else {
      throw FormatError(w + "/alpha", "expected \"dynamic\" or a number");
    }
  }
  return c;
}

Json to_json(const TrainConfig& c) {
  return {{"steps", c.steps},         {"batch_size", c.batch_size},     {"seq_len", c.seq_len},
          {"lr_max", c.lr_max},       {"lr_min", c.lr_min},             {"warmup_steps", c.warmup_steps},
          {"beta1", c.beta1},         {"beta2", c.beta2},               {"adam_eps", c.adam_eps},
          {"weight_decay", c.weight_decay}, {"grad_clip", c.grad_clip}, {"seed", c.seed},
          {"eval_every", c.eval_every}, {"divergence_dump", c.divergence_dump}};
}

TrainConfig train_config_from_json(const Json& j) {
  const std::string w = "/train";
  reject_unknown(j, w, {"steps", "batch_size", "seq_len", "lr_max", "lr_min", "warmup_steps", "beta1", "beta2",
                        "adam_eps", "weight_decay", "grad_clip", "seed", "eval_every", "divergence_dump"});
  TrainConfig c;
  read(j, w, "steps", c.steps);
  read(j, w, "batch_size", c.batch_size);
  read(j, w, "seq_len", c.seq_len);
  read(j, w, "lr_max", c.lr_max);
  read(j, w, "lr_min", c.lr_min);
  read(j, w, "warmup_steps", c.warmup_steps);
  read(j, w, "beta1", c.beta1);
  read(j, w, "beta2", c.beta2);
  read(j, w, "adam_eps", c.adam_eps);
  read(j, w, "weight_decay", c.weight_decay);
  read(j, w, "grad_clip", c.grad_clip);
  read(j, w, "seed", c.seed);
  read(j, w, "eval_every", c.eval_every);
  read(j, w, "divergence_dump", c.divergence_dump);
  if (c.seq_len < 2) throw FormatError(w + "/seq_len", "must be >= 2");
  if (c.batch_size == 0) throw FormatError(w + "/batch_size", "must be > 0");
  if (c.lr_min > c.lr_max) throw FormatError(w + "/lr_min", "exceeds lr_max");
  return c;
}

Json to_json(const AggregationSpec& s) { return {{"batch", to_string(s.batch)}, {"seq", to_string(s.seq)}}; }

AggregationSpec aggregation_from_json(const Json& j) {
  reject_unknown(j, "/agg", {"batch", "seq"});
  AggregationSpec s;
  try {
    if (j.contains("batch")) s.batch = reduction_from_string(j["batch"].get<std::string>());
    if (j.contains("seq")) s.seq = reduction_from_string(j["seq"].get<std::string>());
  } catch (const std::exception& e) {
    throw FormatError("/agg", e.what());
  }
  return s;
}

Json to_json(const ImportanceReport& r) {
  Json j;
  j["agg"] = to_json(r.agg_used);
  j["calibration_checksum"] = r.calibration_checksum;
  j["calibration_tokens"] = r.calibration_tokens;
  j["head_scores"] = r.head_scores;
  j["neuron_scores"] = r.neuron_scores;
  j["emb_scores"] = r.emb_scores;
  j["layer_scores_ppl"] = r.layer_scores_ppl;
  j["layer_scores_bi"] = r.layer_scores_bi;
  Json blocks = Json::array();
  for (const auto& [key, v] : r.block_bi) blocks.push_back({{"start", key.first}, {"length", key.second}, {"bi", v}});
  j["block_bi"] = blocks;
  Json rank;
  Json heads = Json::array(), neurons = Json::array();
  for (const auto& s : r.head_scores) heads.push_back(rank_descending(s));
  for (const auto& s : r.neuron_scores) neurons.push_back(rank_descending(s));
  rank["heads"] = heads;
  rank["neurons"] = neurons;
  rank["emb"] = rank_descending(r.emb_scores);
  rank["layers_ppl"] = rank_descending(r.layer_scores_ppl);
  rank["layers_bi"] = rank_descending(r.layer_scores_bi);
  j["rankings"] = rank;
  return j;
}

ImportanceReport importance_report_from_json(const Json& j) {
  ImportanceReport r;
  try {
    if (j.contains("agg")) r.agg_used = aggregation_from_json(j["agg"]);
    r.calibration_checksum = j.value("calibration_checksum", std::uint64_t{0});
    r.calibration_tokens = j.value("calibration_tokens", std::size_t{0});
    r.head_scores = nested(j, "head_scores");
    r.neuron_scores = nested(j, "neuron_scores");
    r.emb_scores = j.value("emb_scores", std::vector<double>{});
    r.layer_scores_ppl = j.value("layer_scores_ppl", std::vector<double>{});
    r.layer_scores_bi = j.value("layer_scores_bi", std::vector<double>{});
    if (j.contains("block_bi")) {
      for (const auto& b : j["block_bi"]) {
        r.block_bi[{b.at("start").get<std::size_t>(), b.at("length").get<std::size_t>()}] = b.at("bi").get<double>();
      }
    }
  } catch (const FormatError&) {
    throw;
  } catch (const std::exception& e) {
    throw FormatError("/report", e.what());
  }
  return r;
}

Json to_json(const StepMetrics& m) {
  return {{"step", m.step},     {"lr", m.lr},         {"total", m.total},
          {"clm", m.clm},       {"logits", m.logits}, {"is", m.is},
          {"alpha", m.alpha},   {"weighted_is", m.weighted_is}, {"tokens", m.tokens}};
}

}  // namespace trimkit
