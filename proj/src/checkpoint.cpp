#include "trimkit/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "trimkit/serialize.hpp"

namespace trimkit::inline TRIMKIT_NS {

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  }
  return v;
}

Json header_json(const Model& model) {
  Json j;
  j["config"] = to_json(model.config);
  Json dir = Json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : model.named_tensors()) {
    Json e;
    e["name"] = name;
    e["dtype"] = "f32";
    e["shape"] = t->shape();
    e["offset"] = offset;
    offset += t->numel() * 4;
    dir.push_back(e);
  }
  j["tensors"] = dir;
  return j;
}

}  // namespace

std::string checkpoint_header(const Model& model) { return header_json(model).dump(); }

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::filesystem::path& path, const std::string& contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FileError("cannot write '" + tmp.string() + "'");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw FileError("write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw FileError("cannot rename onto '" + path.string() + "': " + ec.message());
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  model.validate();
  const std::string header = checkpoint_header(model);
  std::string out(kCheckpointMagic, 4);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, header.size());
  out += header;
  for (const auto& [name, t] : model.named_tensors()) {
    for (Real v : t->data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  write_file_atomic(path, out);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const std::exception& e) {
    throw CheckpointError("file", e.what());
  }
  if (bytes.size() < 16) throw CheckpointError("magic", "file too short for a checkpoint preamble");
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw CheckpointError("magic", "expected \"MTRF\"");
  }
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion) {
    throw CheckpointError("version", "unsupported format version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (header_len > bytes.size() - 16) throw CheckpointError("header_length", "exceeds file size");
  Json header;
  try {
    header = Json::parse(bytes.substr(16, header_len));
  } catch (const std::exception& e) {
    throw CheckpointError("header", e.what());
  }
  const std::size_t payload = 16 + header_len;
  const std::uint64_t payload_size = bytes.size() - payload;

  ModelConfig config;
  try {
    config = model_config_from_json(header.at("config"));
    config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError("config", e.what());
  }
  Model model(config);
  auto named = model.named_tensors();
  if (!header.contains("tensors") || !header["tensors"].is_array()) {
    throw CheckpointError("tensors", "missing tensor directory");
  }
  const auto& dir = header["tensors"];
  if (dir.size() != named.size()) {
    throw CheckpointError("tensors", "directory lists " + std::to_string(dir.size()) +
                                         " tensors, config implies " + std::to_string(named.size()));
  }
  std::uint64_t expected_offset = 0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, t] = named[i];
    const auto& e = dir[i];
    const std::string where = "tensors[" + std::to_string(i) + "]";
    try {
      if (e.at("name").get<std::string>() != name) {
        throw CheckpointError(where + ".name", "expected '" + name + "'");
      }
      if (e.at("dtype").get<std::string>() != "f32") throw CheckpointError(where + ".dtype", "only f32");
      if (e.at("shape").get<Shape>() != t->shape()) {
        throw CheckpointError(where + ".shape", "expected " + shape_string(t->shape()));
      }
      const auto offset = e.at("offset").get<std::uint64_t>();
      if (offset != expected_offset) {
        throw CheckpointError(where + ".offset", "overlapping or out-of-order offset " + std::to_string(offset));
      }
    } catch (const CheckpointError&) {
      throw;
    } catch (const std::exception& ex) {
      throw CheckpointError(where, ex.what());
    }
    const std::uint64_t nbytes = t->numel() * 4;
    if (expected_offset + nbytes > payload_size) throw CheckpointError("payload", "truncated at " + name);
    auto data = t->mutable_data();
    for (std::size_t k = 0; k < data.size(); ++k) {
      data[k] = static_cast<Real>(
          std::bit_cast<float>(get_le<std::uint32_t>(bytes, payload + expected_offset + 4 * k)));
    }
    expected_offset += nbytes;
  }
  if (expected_offset != payload_size) {
    throw CheckpointError("payload", std::to_string(payload_size - expected_offset) + " trailing bytes");
  }
  return model;
}

}  // namespace trimkit
