#include "trimkit/dataset.hpp"

#include <algorithm>
#include <bit>
#include <numeric>

#include "trimkit/checkpoint.hpp"
#include "trimkit/serialize.hpp"

namespace trimkit::inline TRIMKIT_NS {

std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw DatasetError("unknown split '" + s + "'");
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

Split assign_split(std::size_t doc, std::uint64_t seed, double val_fraction) {
  const double u = static_cast<double>(splitmix64(seed ^ splitmix64(doc)) >> 11) * 0x1.0p-53;
  return u < val_fraction ? Split::val : Split::train;
}

}  // namespace

void TokenDataset::validate() const {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab_size) {
      throw DatasetError("token " + std::to_string(ids[i]) + " at " + std::to_string(i) + " >= vocab");
    }
  }
  std::size_t pos = 0;
  for (const auto& d : documents) {
    if (d.begin != pos || d.end < d.begin || d.end > ids.size()) throw DatasetError("bad document boundaries");
    pos = d.end;
  }
  if (pos != ids.size()) throw DatasetError("documents do not cover the token stream");
}

std::size_t TokenDataset::tokens(Split split) const {
  std::size_t n = 0;
  for (const auto& d : documents) {
    if (d.split == split) n += d.end - d.begin;
  }
  return n;
}

TokenDataset ingest_text(const std::string& text, std::uint64_t seed, double val_fraction) {
  if (text.empty()) throw DatasetError("empty input");
  TokenDataset ds;
  std::size_t i = 0;
  while (i < text.size()) {
    std::size_t next = text.find("\n\n", i);
    if (next == std::string::npos) next = text.size();
    if (next > i) {
      Document d{ds.ids.size(), 0, assign_split(ds.documents.size(), seed, val_fraction)};
      for (std::size_t k = i; k < next; ++k) ds.ids.push_back(static_cast<unsigned char>(text[k]));
      d.end = ds.ids.size();
      ds.documents.push_back(d);
    }
    i = next;
    while (i < text.size() && text[i] == '\n') ++i;
  }
  if (ds.ids.empty()) throw DatasetError("input contains no text");
  return ds;
}

TokenDataset ingest_text_file(const std::filesystem::path& path, std::uint64_t seed, double val_fraction) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
  return ingest_text(text, seed, val_fraction);
}

void save_dataset(const TokenDataset& ds, const std::filesystem::path& stem) {
  ds.validate();
  std::string bin;
  bin.reserve(ds.ids.size() * 4);
  for (auto id : ds.ids) {
    for (int b = 0; b < 4; ++b) bin.push_back(static_cast<char>((id >> (8 * b)) & 0xff));
  }
  Json docs = Json::array();
  for (const auto& d : ds.documents) docs.push_back({d.begin, d.end, to_string(d.split)});
  Json manifest = {{"vocab_size", ds.vocab_size}, {"tokens", ds.ids.size()}, {"documents", docs}};
  auto bin_path = stem;
  bin_path += ".bin";
  auto json_path = stem;
  json_path += ".json";
  write_file_atomic(bin_path, bin);
  write_file_atomic(json_path, manifest.dump(1));
}

TokenDataset load_dataset(const std::filesystem::path& stem) {
  auto bin_path = stem;
  bin_path += ".bin";
  auto json_path = stem;
  json_path += ".json";
  TokenDataset ds;
  std::string bin, text;
  try {
    bin = read_file(bin_path);
    text = read_file(json_path);
  } catch (const std::exception& e) {
    throw DatasetError(e.what());
  }
  const Json manifest = parse_json(text, json_path.string());
  try {
    ds.vocab_size = manifest.at("vocab_size").get<std::size_t>();
    if (manifest.at("tokens").get<std::size_t>() * 4 != bin.size()) {
      throw DatasetError("token file size disagrees with manifest");
    }
    for (const auto& d : manifest.at("documents")) {
      ds.documents.push_back({d.at(0).get<std::size_t>(), d.at(1).get<std::size_t>(),
                              split_from_string(d.at(2).get<std::string>())});
    }
  } catch (const DatasetError&) {
    throw;
  } catch (const std::exception& e) {
    throw DatasetError(std::string("manifest: ") + e.what());
  }
  ds.ids.resize(bin.size() / 4);
  for (std::size_t i = 0; i < ds.ids.size(); ++i) {
    std::uint32_t v = 0;
    for (int b = 0; b < 4; ++b) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bin[4 * i + b])) << (8 * b);
    ds.ids[i] = v;
  }
  ds.validate();
  return ds;
}

TokenBatch sample_calibration(const TokenDataset& ds, Split split, std::size_t n, std::size_t seq_len,
                              std::uint64_t seed) {
  if (n == 0 || seq_len == 0) throw DatasetError("calibration needs n > 0 and seq_len > 0");
  std::vector<std::size_t> starts;
  for (const auto& d : ds.documents) {
    if (d.split != split) continue;
    for (std::size_t s = d.begin; s + seq_len <= d.end; s += seq_len) starts.push_back(s);
  }
  if (starts.size() < n) {
    throw DatasetError("insufficient data: " + std::to_string(starts.size()) + " windows of " +
                       std::to_string(seq_len) + " available, " + std::to_string(n) + " requested");
  }
  std::mt19937_64 rng(seed);
  std::shuffle(starts.begin(), starts.end(), rng);
  TokenBatch batch{n, seq_len, {}};
  batch.ids.reserve(n * seq_len);
  for (std::size_t i = 0; i < n; ++i) {
    batch.ids.insert(batch.ids.end(), ds.ids.begin() + starts[i], ds.ids.begin() + starts[i] + seq_len);
  }
  return batch;
}

WindowSampler::WindowSampler(const TokenDataset& ds, Split split, std::size_t seq_len, std::uint64_t seed)
    : ds_(&ds), seq_len_(seq_len), rng_(seed) {
  for (const auto& d : ds.documents) {
    if (d.split != split) continue;
    for (std::size_t s = d.begin; s + seq_len <= d.end; ++s) starts_.push_back(s);
  }
  if (starts_.empty()) throw DatasetError("no window of " + std::to_string(seq_len) + " tokens in split");
}

TokenBatch WindowSampler::next(std::size_t batch) {
  TokenBatch out{batch, seq_len_, {}};
  out.ids.reserve(batch * seq_len_);
  std::uniform_int_distribution<std::size_t> pick(0, starts_.size() - 1);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto s = starts_[pick(rng_)];
    out.ids.insert(out.ids.end(), ds_->ids.begin() + s, ds_->ids.begin() + s + seq_len_);
  }
  return out;
}

std::vector<TokenBatch> fixed_batches(const TokenDataset& ds, Split split, std::size_t count,
                                      std::size_t batch, std::size_t seq_len, std::uint64_t seed) {
  const auto all = sample_calibration(ds, split, count * batch, seq_len, seed);
  std::vector<TokenBatch> out;
  for (std::size_t c = 0; c < count; ++c) {
    TokenBatch b{batch, seq_len, {}};
    b.ids.assign(all.ids.begin() + c * batch * seq_len, all.ids.begin() + (c + 1) * batch * seq_len);
    out.push_back(std::move(b));
  }
  return out;
}

TokenDataset make_bigram_corpus(std::size_t vocab, std::size_t branching, std::size_t documents,
                                std::size_t doc_len, std::uint64_t seed, double val_fraction) {
  if (vocab < 2 || branching == 0 || branching > vocab || documents == 0 || doc_len == 0) {
    throw DatasetError("bad bigram corpus parameters");
  }
  std::mt19937_64 rng(seed);
  std::vector<std::vector<std::uint32_t>> next(vocab);
  std::vector<std::discrete_distribution<std::size_t>> weights;
  std::vector<std::uint32_t> pool(vocab);
  std::iota(pool.begin(), pool.end(), 0U);
  std::exponential_distribution<double> expo(1.0);
  for (std::size_t t = 0; t < vocab; ++t) {
    std::shuffle(pool.begin(), pool.end(), rng);
    next[t].assign(pool.begin(), pool.begin() + branching);
    std::vector<double> w(branching);
    for (auto& x : w) x = expo(rng);
    weights.emplace_back(w.begin(), w.end());
  }
  std::uniform_int_distribution<std::uint32_t> first(0, static_cast<std::uint32_t>(vocab - 1));
  TokenDataset ds;
  ds.vocab_size = vocab;
  for (std::size_t d = 0; d < documents; ++d) {
    Document doc{ds.ids.size(), 0, assign_split(d, seed, val_fraction)};
    std::uint32_t tok = first(rng);
    for (std::size_t i = 0; i < doc_len; ++i) {
      ds.ids.push_back(tok);
      tok = next[tok][weights[tok](rng)];
    }
    doc.end = ds.ids.size();
    ds.documents.push_back(doc);
  }
  return ds;
}

}  // namespace trimkit
