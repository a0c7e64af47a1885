#include "trimkit/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace trimkit::inline TRIMKIT_NS {

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError("invalid model config: " + what); };
  if (num_layers == 0) fail("num_layers must be > 0");
  if (d_model == 0) fail("d_model must be > 0");
  if (num_heads == 0) fail("num_heads must be > 0");
  if (num_query_groups == 0) fail("num_query_groups must be > 0");
  if (d_head == 0) fail("d_head must be > 0");
  if (d_head % 2 != 0) fail("d_head must be even (rotary pairs)");
  if (d_hidden == 0) fail("d_hidden must be > 0");
  if (vocab_size == 0) fail("vocab_size must be > 0");
  if (max_seq_len == 0) fail("max_seq_len must be > 0");
  if (num_heads % num_query_groups != 0) fail("num_heads % num_query_groups != 0");
}

std::string describe(const ModelConfig& c) {
  std::ostringstream os;
  os << "layers=" << c.num_layers << " d_model=" << c.d_model << " heads=" << c.num_heads
     << " groups=" << c.num_query_groups << " d_head=" << c.d_head << " d_hidden=" << c.d_hidden
     << " vocab=" << c.vocab_size << (c.tie_embeddings ? " tied" : " untied");
  return os.str();
}

std::size_t fit_query_groups(std::size_t heads, std::size_t preferred) {
  for (std::size_t g = std::min(heads, preferred); g > 1; --g) {
    if (heads % g == 0) return g;
  }
  return 1;
}

// ---- Model -----------------------------------------------------------------

Model::Model(ModelConfig cfg) : config(cfg) {
  config.validate();
  const auto d = config.d_model;
  const auto qw = config.num_heads * config.d_head;
  const auto kw = config.num_query_groups * config.d_head;
  embedding = Tensor::zeros({config.vocab_size, d});
  layers.resize(config.num_layers);
  for (auto& l : layers) {
    l.ln1_gamma = Tensor::zeros({d});
    l.ln1_beta = Tensor::zeros({d});
    l.wq = Tensor::zeros({qw, d});
    l.wk = Tensor::zeros({kw, d});
    l.wv = Tensor::zeros({kw, d});
    l.wo = Tensor::zeros({qw, d});
    l.ln2_gamma = Tensor::zeros({d});
    l.ln2_beta = Tensor::zeros({d});
    l.w1 = Tensor::zeros({config.d_hidden, d});
    l.w2 = Tensor::zeros({config.d_hidden, d});
  }
  lnf_gamma = Tensor::zeros({d});
  lnf_beta = Tensor::zeros({d});
  if (!config.tie_embeddings) output_head = Tensor::zeros({config.vocab_size, d});
}

Model::Model(const Model& other) : config(other.config) {
  embedding = other.embedding.clone();
  layers.reserve(other.layers.size());
  for (const auto& l : other.layers) {
    layers.push_back({l.ln1_gamma.clone(), l.ln1_beta.clone(), l.wq.clone(), l.wk.clone(),
                      l.wv.clone(), l.wo.clone(), l.ln2_gamma.clone(), l.ln2_beta.clone(),
                      l.w1.clone(), l.w2.clone()});
  }
  lnf_gamma = other.lnf_gamma.clone();
  lnf_beta = other.lnf_beta.clone();
  output_head = other.output_head.clone();
}

Model& Model::operator=(const Model& other) {
  if (this != &other) *this = Model(other);
  return *this;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_tensors() {
  std::vector<std::pair<std::string, Tensor*>> out;
  out.emplace_back("embedding", &embedding);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    auto& l = layers[i];
    const auto p = "layers." + std::to_string(i) + ".";
    out.emplace_back(p + "ln1.gamma", &l.ln1_gamma);
    out.emplace_back(p + "ln1.beta", &l.ln1_beta);
    out.emplace_back(p + "attn.wq", &l.wq);
    out.emplace_back(p + "attn.wk", &l.wk);
    out.emplace_back(p + "attn.wv", &l.wv);
    out.emplace_back(p + "attn.wo", &l.wo);
    out.emplace_back(p + "ln2.gamma", &l.ln2_gamma);
    out.emplace_back(p + "ln2.beta", &l.ln2_beta);
    out.emplace_back(p + "mlp.w1", &l.w1);
    out.emplace_back(p + "mlp.w2", &l.w2);
  }
  out.emplace_back("lnf.gamma", &lnf_gamma);
  out.emplace_back("lnf.beta", &lnf_beta);
  if (!config.tie_embeddings) out.emplace_back("output_head", &output_head);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& [name, t] : const_cast<Model*>(this)->named_tensors()) out.emplace_back(name, t);
  return out;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(*t);
  return out;
}

void Model::set_trainable(bool trainable) {
  for (auto& [name, t] : named_tensors()) t->set_requires_grad(trainable);
}

void Model::zero_grad() {
  for (auto& [name, t] : named_tensors()) t->zero_grad();
}

void Model::validate() const {
  config.validate();
  if (layers.size() != config.num_layers) {
    throw ConfigError("model has " + std::to_string(layers.size()) + " layers, config says " +
                      std::to_string(config.num_layers));
  }
  const Model reference(config);
  const auto expected = reference.named_tensors();
  const auto actual = named_tensors();
  if (expected.size() != actual.size()) throw ConfigError("tensor set does not match config");
  for (std::size_t i = 0; i < expected.size(); ++i) {
    if (!actual[i].second->defined() || actual[i].second->shape() != expected[i].second->shape()) {
      throw ConfigError("tensor " + actual[i].first + " has shape " +
                        (actual[i].second->defined() ? shape_string(actual[i].second->shape())
                                                     : std::string("undefined")) +
                        ", config requires " + shape_string(expected[i].second->shape()));
    }
  }
}

Model build_model(const ModelConfig& config, std::uint64_t seed) {
  Model model(config);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 0.02);
  for (auto& [name, t] : model.named_tensors()) {
    auto data = t->mutable_data();
    const bool is_gamma = name.ends_with(".gamma");
    const bool is_beta = name.ends_with(".beta");
    for (auto& v : data) {
      v = is_gamma ? Real(1) : is_beta ? Real(0) : static_cast<Real>(normal(rng));
    }
  }
  return model;
}

// ---- forward ---------------------------------------------------------------

std::pair<TokenBatch, std::vector<std::uint32_t>> TokenBatch::shifted() const {
  if (seq < 2) throw std::invalid_argument("next-token shift needs sequences of length >= 2");
  TokenBatch inputs{batch, seq - 1, {}};
  std::vector<std::uint32_t> targets;
  inputs.ids.reserve(batch * (seq - 1));
  targets.reserve(batch * (seq - 1));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t s = 0; s + 1 < seq; ++s) {
      inputs.ids.push_back(at(b, s));
      targets.push_back(at(b, s + 1));
    }
  }
  return {std::move(inputs), std::move(targets)};
}

ActivationRecord forward(const Model& model, const TokenBatch& tokens,
                         const ForwardOptions& options) {
  const auto& cfg = model.config;
  if (tokens.batch == 0 || tokens.seq == 0 || tokens.ids.size() != tokens.batch * tokens.seq) {
    throw std::invalid_argument("forward: malformed token batch");
  }
  if (tokens.seq > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(tokens.seq) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (auto id : tokens.ids) {
    if (id >= cfg.vocab_size) {
      throw std::out_of_range("forward: token id " + std::to_string(id) + " >= vocab " +
                              std::to_string(cfg.vocab_size));
    }
  }
  const auto& cap = options.capture;
  ActivationRecord rec;
  rec.batch = tokens.batch;
  rec.seq = tokens.seq;
  rec.layers.resize(cfg.num_layers);
  const AttentionShape attn{tokens.batch, tokens.seq, cfg.num_heads, cfg.num_query_groups,
                            cfg.d_head};

  Tensor x = embedding(model.embedding, tokens.ids);
  for (std::size_t i = 0; i < cfg.num_layers; ++i) {
    if (cap.block_inputs) rec.block_inputs.push_back(x);
    if (std::find(options.skip_layers.begin(), options.skip_layers.end(), i) !=
        options.skip_layers.end()) {
      continue;
    }
    const auto& w = model.layers[i];
    auto& lr = rec.layers[i];

    Tensor h = layer_norm(x, w.ln1_gamma, w.ln1_beta);
    Tensor q = linear(h, w.wq);
    Tensor k = linear(h, w.wk);
    Tensor v = linear(h, w.wv);
    if (cap.qkv) {
      lr.q = q;
      lr.k = k;
      lr.v = v;
    }
    Tensor heads =
        causal_attention(rope(q, tokens.batch, tokens.seq, cfg.num_heads, cfg.d_head),
                         rope(k, tokens.batch, tokens.seq, cfg.num_query_groups, cfg.d_head), v, attn);
    x = add(x, matmul(heads, w.wo));

    Tensor h2 = layer_norm(x, w.ln2_gamma, w.ln2_beta);
    Tensor pre = linear(h2, w.w1);
    Tensor post = squared_relu(pre);
    x = add(x, matmul(post, w.w2));

    if (cap.heads) lr.head_out = heads;
    if (cap.mlp) {
      lr.mlp_pre = pre;
      lr.mlp_post = post;
    }
    if (cap.post_ln) {
      lr.ln1_out = h;
      lr.ln2_out = h2;
    }
  }
  if (cap.block_inputs) rec.block_inputs.push_back(x);
  Tensor hf = layer_norm(x, model.lnf_gamma, model.lnf_beta);
  if (cap.post_ln) rec.final_ln_out = hf;
  rec.logits = linear(hf, model.head());
  return rec;
}

Tensor lm_loss(const Model& model, const TokenBatch& batch,
               const std::vector<std::size_t>& skip_layers) {
  auto [inputs, targets] = batch.shifted();
  auto rec = forward(model, inputs, {CaptureSpec{}, skip_layers});
  return cross_entropy(rec.logits, targets);
}

double EvalResult::perplexity() const { return std::exp(mean_nll); }

EvalResult evaluate(const Model& model, std::span<const TokenBatch> data,
                    const std::vector<std::size_t>& skip_layers) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  double weighted = 0;
  std::size_t tokens = 0;
  for (const auto& batch : data) {
    const std::size_t n = batch.batch * (batch.seq - 1);
    weighted += static_cast<double>(lm_loss(model, batch, skip_layers).item()) * n;
    tokens += n;
  }
  return {weighted / static_cast<double>(tokens), tokens};
}

double perplexity(const Model& model, std::span<const TokenBatch> data,
                  const std::vector<std::size_t>& skip_layers) {
  return evaluate(model, data, skip_layers).perplexity();
}

// ---- accounting ------------------------------------------------------------

namespace {

ParamCount count_unchecked(const ModelConfig& c) {
  const std::uint64_t d = c.d_model;
  const std::uint64_t q_width = static_cast<std::uint64_t>(c.num_heads) * c.d_head;
  const std::uint64_t kv_width = static_cast<std::uint64_t>(c.num_query_groups) * c.d_head;
  const std::uint64_t per_layer = 2 * q_width * d    // W^Q, W^O
                                  + 2 * kv_width * d  // W^K, W^V
                                  + 2 * static_cast<std::uint64_t>(c.d_hidden) * d  // W1, W2
                                  + 4 * d;            // two LayerNorms
  ParamCount out;
  out.non_embedding = per_layer * c.num_layers + 2 * d;  // + final LayerNorm
  const std::uint64_t table = static_cast<std::uint64_t>(c.vocab_size) * d;
  out.total = out.non_embedding + (c.tie_embeddings ? table : 2 * table);
  return out;
}

}  // namespace

ParamCount count_params(const ModelConfig& config) {
  config.validate();
  return count_unchecked(config);
}

double count_flops_per_step(const ModelConfig& config, std::size_t batch, std::size_t seq) {
  return 6.0 * static_cast<double>(count_unchecked(config).total) * static_cast<double>(batch) *
         static_cast<double>(seq);
}

}  // namespace trimkit
