#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <iterator>

#include "satlab/training.hpp"

namespace satlab {
namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Batch gather(const Corpus& corpus, std::span<const std::size_t> starts, std::size_t seq_len) {
  Batch out;
  out.offsets.assign(starts.begin(), starts.end());
  std::vector<std::int32_t> in(starts.size() * seq_len);
  std::vector<std::int32_t> tg(starts.size() * seq_len);
  for (std::size_t b = 0; b < starts.size(); ++b) {
    const std::uint8_t* src = corpus.bytes.data() + starts[b];
    for (std::size_t t = 0; t < seq_len; ++t) {
      in[b * seq_len + t] = src[t];
      tg[b * seq_len + t] = src[t + 1];
    }
  }
  out.inputs = TokenGrid(starts.size(), seq_len, std::move(in));
  out.targets = TokenGrid(starts.size(), seq_len, std::move(tg));
  return out;
}

}  // namespace

Corpus Corpus::from_bytes(std::vector<std::uint8_t> bytes, double val_fraction) {
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) {
    throw std::invalid_argument(fmt::format("corpus: val_fraction must lie in (0, 1), got {}", val_fraction));
  }
  Corpus c;
  const auto n = bytes.size();
  const auto held = static_cast<std::size_t>(std::ceil(val_fraction * static_cast<double>(n)));
  if (n < 2 || held >= n) throw std::invalid_argument(fmt::format("corpus: {} bytes is too short to split", n));
  c.train_end = n - held;
  c.bytes = std::move(bytes);
  return c;
}

Corpus Corpus::load(const std::filesystem::path& path, double val_fraction) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error(fmt::format("corpus: cannot open '{}'", path.string()));
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return from_bytes(std::move(bytes), val_fraction);
}

BatchStream::BatchStream(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed)
    : corpus_(&corpus), seq_len_(seq_len), batch_size_(batch_size), seed_(seed), offsets_(0) {
  if (seq_len == 0 || batch_size == 0) throw std::invalid_argument("batches: seq_len and batch_size must be positive");
  if (corpus.train_end <= seq_len + 1) {
    throw std::invalid_argument(fmt::format("batches: training region of {} bytes cannot hold a window of {} bytes",
                                            corpus.train_end, seq_len + 1));
  }
  offsets_ = corpus.train_end - seq_len;
}

Batch BatchStream::batch_at(std::size_t step) const {
  std::vector<std::size_t> starts(batch_size_);
  const std::uint64_t base = splitmix64(seed_ ^ splitmix64(static_cast<std::uint64_t>(step)));
  for (std::size_t b = 0; b < batch_size_; ++b) {
    starts[b] = static_cast<std::size_t>(splitmix64(base + b) % offsets_);
  }
  return gather(*corpus_, starts, seq_len_);
}

BatchStream make_batches(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size, std::uint64_t seed) {
  return BatchStream(corpus, seq_len, batch_size, seed);
}

std::vector<Batch> validation_batches(const Corpus& corpus, std::size_t seq_len, std::size_t batch_size,
                                      std::size_t max_windows) {
  if (seq_len == 0 || batch_size == 0) throw std::invalid_argument("validation: seq_len and batch_size must be positive");
  const std::size_t tail = corpus.bytes.size() - corpus.train_end;
  if (tail < seq_len + 1) {
    throw std::invalid_argument(
        fmt::format("validation: held-out tail of {} bytes cannot hold a window of {} bytes", tail, seq_len + 1));
  }
  const std::size_t windows = std::min((tail - 1) / seq_len, max_windows);
  std::vector<std::size_t> starts(windows);
  for (std::size_t w = 0; w < windows; ++w) starts[w] = corpus.train_end + w * seq_len;
  std::vector<Batch> out;
  for (std::size_t i = 0; i < windows; i += batch_size) {
    const std::size_t n = std::min(batch_size, windows - i);
    out.push_back(gather(corpus, std::span<const std::size_t>(starts).subspan(i, n), seq_len));
  }
  return out;
}

}  // namespace satlab
