#include <fmt/format.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "satlab/training.hpp"

namespace satlab {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint payload is written in host byte order");

constexpr const char* kFormat = "satlab-checkpoint";
constexpr int kVersion = 1;

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 1099511628211ULL;
  }
  return h;
}

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "float32" : "float64";
}

nlohmann::json metrics_to_json(std::span<const StepMetrics> log) {
  auto arr = nlohmann::json::array();
  for (const auto& m : log) {
    arr.push_back({{"step", m.step},
                   {"lr", m.lr},
                   {"train_loss", m.train_loss},
                   {"grad_norm", m.grad_norm},
                   {"val_loss", m.val_loss ? nlohmann::json(*m.val_loss) : nlohmann::json(nullptr)}});
  }
  return arr;
}

std::vector<StepMetrics> metrics_from_json(const nlohmann::json& arr) {
  std::vector<StepMetrics> out;
  for (const auto& e : arr) {
    StepMetrics m;
    m.step = e.at("step").get<std::size_t>();
    m.lr = e.at("lr").get<double>();
    m.train_loss = e.at("train_loss").get<double>();
    m.grad_norm = e.at("grad_norm").get<double>();
    if (!e.at("val_loss").is_null()) m.val_loss = e.at("val_loss").get<double>();
    out.push_back(m);
  }
  return out;
}

struct RawFile {
  nlohmann::json header;
  std::vector<std::uint8_t> payload;
};

RawFile read_raw(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("checkpoint: cannot open '{}'", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto fail = [&](const std::string& what) {
    return IntegrityError(fmt::format("checkpoint '{}': {}", path.string(), what));
  };
  if (bytes.size() < 8) throw fail("file shorter than the header length prefix");
  std::uint64_t header_len = 0;
  std::memcpy(&header_len, bytes.data(), 8);
  if (header_len > bytes.size() - 8) throw fail(fmt::format("header length {} exceeds file size {}", header_len, bytes.size()));

  RawFile raw;
  try {
    raw.header = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw fail(fmt::format("unreadable header ({})", e.what()));
  }
  const auto& h = raw.header;
  try {
    if (h.at("format").get<std::string>() != kFormat || h.at("version").get<int>() != kVersion) {
      throw fail("unsupported format or version");
    }
    const auto payload_len = bytes.size() - 8 - header_len;
    const auto declared = h.at("payload_bytes").get<std::uint64_t>();
    if (declared != payload_len) {
      throw fail(fmt::format("payload is {} bytes but the header declares {}", payload_len, declared));
    }
    std::uint64_t expected_offset = 0;
    for (const auto& t : h.at("tensors")) {
      const auto offset = t.at("offset").get<std::uint64_t>();
      const auto nbytes = t.at("nbytes").get<std::uint64_t>();
      const auto shape = t.at("shape").get<Shape>();
      const std::size_t width = t.at("dtype").get<std::string>() == "float32" ? 4 : 8;
      if (offset != expected_offset || nbytes != numel(shape) * width || offset + nbytes > payload_len) {
        throw fail(fmt::format("manifest entry '{}' is inconsistent", t.at("name").get<std::string>()));
      }
      expected_offset += nbytes;
    }
    if (expected_offset != payload_len) throw fail("manifest does not cover the payload");
    const auto checksum = h.at("checksum").get<std::uint64_t>();
    if (fnv1a(bytes.data() + 8 + header_len, payload_len) != checksum) throw fail("payload checksum mismatch");
  } catch (const nlohmann::json::exception& e) {
    throw fail(fmt::format("malformed header ({})", e.what()));
  }
  raw.payload.assign(bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len), bytes.end());
  return raw;
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const Checkpoint<T>& ckpt) {
  const auto params = ckpt.weights.parameters();
  if (ckpt.state.m.size() != params.size() || ckpt.state.v.size() != params.size()) {
    throw std::invalid_argument("save_checkpoint: optimizer state does not match the parameters");
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> entries;
  for (const auto* p : params) entries.emplace_back(p->name, &p->value);
  for (std::size_t i = 0; i < params.size(); ++i) entries.emplace_back("adam.m/" + params[i]->name, &ckpt.state.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) entries.emplace_back("adam.v/" + params[i]->name, &ckpt.state.v[i]);

  std::vector<std::uint8_t> payload;
  auto manifest = nlohmann::json::array();
  for (const auto& [name, t] : entries) {
    const std::size_t nbytes = t->size() * sizeof(T);
    manifest.push_back(
        {{"name", name}, {"dtype", dtype_name<T>()}, {"shape", t->shape()}, {"offset", payload.size()}, {"nbytes", nbytes}});
    const auto* src = reinterpret_cast<const std::uint8_t*>(t->data());
    payload.insert(payload.end(), src, src + nbytes);
  }

  nlohmann::json header{{"format", kFormat},
                        {"version", kVersion},
                        {"dtype", dtype_name<T>()},
                        {"model", to_json(ckpt.weights.config)},
                        {"train", ckpt.train ? to_json(*ckpt.train) : nlohmann::json(nullptr)},
                        {"step", ckpt.step},
                        {"adam_step", ckpt.state.step},
                        {"metrics", metrics_to_json(ckpt.metrics)},
                        {"tensors", manifest},
                        {"payload_bytes", payload.size()},
                        {"checksum", fnv1a(payload.data(), payload.size())}};
  const std::string text = header.dump();
  const std::uint64_t header_len = text.size();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error(fmt::format("save_checkpoint: cannot write '{}'", tmp.string()));
    out.write(reinterpret_cast<const char*>(&header_len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    out.flush();
    if (!out) throw std::runtime_error(fmt::format("save_checkpoint: write to '{}' failed", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

nlohmann::json read_checkpoint_header(const std::filesystem::path& path) { return read_raw(path).header; }

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  const auto raw = read_raw(path);
  const auto& h = raw.header;
  const auto fail = [&](const std::string& what) {
    return IntegrityError(fmt::format("checkpoint '{}': {}", path.string(), what));
  };
  if (h.at("dtype").get<std::string>() != dtype_name<T>()) {
    throw std::invalid_argument(fmt::format("load_checkpoint: file holds {} tensors, requested {}",
                                            h.at("dtype").get<std::string>(), dtype_name<T>()));
  }
  Checkpoint<T> ckpt{build_model<T>(model_config_from_json(h.at("model"))), {}, std::nullopt, 0, {}};
  if (!h.at("train").is_null()) ckpt.train = train_config_from_json(h.at("train"));
  ckpt.step = h.at("step").get<std::size_t>();
  ckpt.metrics = metrics_from_json(h.at("metrics"));

  auto params = ckpt.weights.parameters();
  ckpt.state = OptimizerState<T>::zeros_like(params);
  ckpt.state.step = h.at("adam_step").get<std::size_t>();
  std::vector<std::pair<std::string, Tensor<T>*>> slots;
  for (auto* p : params) slots.emplace_back(p->name, &p->value);
  for (std::size_t i = 0; i < params.size(); ++i) slots.emplace_back("adam.m/" + params[i]->name, &ckpt.state.m[i]);
  for (std::size_t i = 0; i < params.size(); ++i) slots.emplace_back("adam.v/" + params[i]->name, &ckpt.state.v[i]);

  const auto& tensors = h.at("tensors");
  if (tensors.size() != slots.size()) {
    throw fail(fmt::format("manifest lists {} tensors, the model needs {}", tensors.size(), slots.size()));
  }
  for (std::size_t i = 0; i < slots.size(); ++i) {
    const auto& e = tensors[i];
    auto& [name, dst] = slots[i];
    if (e.at("name").get<std::string>() != name || e.at("shape").get<Shape>() != dst->shape()) {
      throw fail(fmt::format("manifest entry {} ('{}') does not match model tensor '{}' {}", i,
                             e.at("name").get<std::string>(), name, to_string(dst->shape())));
    }
    std::memcpy(dst->data(), raw.payload.data() + e.at("offset").get<std::size_t>(), dst->size() * sizeof(T));
  }
  return ckpt;
}

template void save_checkpoint<float>(const std::filesystem::path&, const Checkpoint<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const Checkpoint<double>&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace satlab
