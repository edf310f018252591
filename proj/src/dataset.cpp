#include "cts/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <map>
#include <numeric>
#include <sstream>

#include "cts/error.hpp"

namespace cts {

namespace {

std::size_t sample_numel(const Shape& s) { return static_cast<std::size_t>(numel(s)); }

Shape batch_shape(const Shape& sample, std::size_t n) {
  Shape s{static_cast<std::int64_t>(n)};
  s.insert(s.end(), sample.begin(), sample.end());
  return s;
}

Batch gather(const Tensor& x, const std::vector<std::int32_t>& y, const Shape& sample,
             std::span<const std::size_t> indices) {
  const std::size_t per = sample_numel(sample);
  std::vector<double> data(indices.size() * per);
  std::vector<std::int32_t> labels(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t src = indices[i];
    require(src < y.size(), ErrorCode::kInvalidArgument, "batch index ", src, " out of range");
    std::copy_n(x.data().begin() + static_cast<std::ptrdiff_t>(src * per), per,
                data.begin() + static_cast<std::ptrdiff_t>(i * per));
    labels[i] = y[src];
  }
  return Batch{Tensor(batch_shape(sample, indices.size()), std::move(data)), std::move(labels)};
}

void split_into(Dataset& ds, const std::vector<double>& xs, const std::vector<std::int32_t>& ys,
                std::size_t n, std::uint64_t seed) {
  const std::size_t per = sample_numel(ds.sample_shape);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed, Stream::kData, 1);
  std::shuffle(order.begin(), order.end(), rng.engine());
  const std::size_t n_train = (n * 8) / 10;
  require(n_train > 0 && n_train < n, ErrorCode::kInvalidArgument, "dataset of ", n,
          " samples is too small to split 80/20");
  auto fill = [&](std::size_t first, std::size_t count, Tensor& x, std::vector<std::int32_t>& y) {
    std::vector<double> data(count * per);
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t src = order[first + i];
      std::copy_n(xs.begin() + static_cast<std::ptrdiff_t>(src * per), per,
                  data.begin() + static_cast<std::ptrdiff_t>(i * per));
      y[i] = ys[src];
    }
    x = Tensor(batch_shape(ds.sample_shape, count), std::move(data));
  };
  fill(0, n_train, ds.train_x, ds.train_y);
  fill(n_train, n - n_train, ds.test_x, ds.test_y);
}

std::uint32_t read_be32(std::span<const std::uint8_t> b, std::size_t off) {
  return (static_cast<std::uint32_t>(b[off]) << 24) | (static_cast<std::uint32_t>(b[off + 1]) << 16) |
         (static_cast<std::uint32_t>(b[off + 2]) << 8) | static_cast<std::uint32_t>(b[off + 3]);
}

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const auto eq = item.find('=');
    require(eq != std::string::npos, ErrorCode::kParse, "dataset spec: expected key=value, got '",
            item, "'");
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

}  // namespace

Batch Dataset::train_batch(std::span<const std::size_t> indices) const {
  return gather(train_x, train_y, sample_shape, indices);
}

Batch Dataset::test_batch(std::size_t first, std::size_t count) const {
  require(first + count <= test_size() && count > 0, ErrorCode::kInvalidArgument,
          "test batch out of range");
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), first);
  return gather(test_x, test_y, sample_shape, idx);
}

Batch Dataset::train_prefix(std::size_t count) const {
  count = std::min(count, train_size());
  std::vector<std::size_t> idx(count);
  std::iota(idx.begin(), idx.end(), 0);
  return train_batch(idx);
}

Dataset make_blobs(const BlobsSpec& spec) {
  require(spec.classes >= 2 && spec.dim >= 1 && spec.n >= 10, ErrorCode::kInvalidArgument,
          "blobs: need classes >= 2, dim >= 1, n >= 10");
  require(spec.separation >= 0.0, ErrorCode::kInvalidArgument, "blobs: negative separation");
  Dataset ds;
  ds.name = "blobs";
  ds.num_classes = spec.classes;
  if (spec.image_shape.empty()) {
    ds.sample_shape = {spec.dim};
  } else {
    require(numel(spec.image_shape) == spec.dim && spec.image_shape.size() == 3,
            ErrorCode::kInvalidArgument, "blobs: image shape ", shape_str(spec.image_shape),
            " does not hold ", spec.dim, " values");
    ds.sample_shape = spec.image_shape;
  }

  Rng rng(spec.seed, Stream::kData, 0);
  const auto dim = static_cast<std::size_t>(spec.dim);
  const auto k = static_cast<std::size_t>(spec.classes);
  // Centres: orthonormal random directions scaled by sep/sqrt(2), so every pair
  // of centres is exactly `separation` apart when classes <= dim.
  std::vector<std::vector<double>> centres(k, std::vector<double>(dim));
  for (std::size_t c = 0; c < k; ++c) {
    auto& v = centres[c];
    for (auto& e : v) e = rng.normal();
    if (c < dim) {
      for (std::size_t p = 0; p < c; ++p) {
        double dot = 0.0;
        for (std::size_t i = 0; i < dim; ++i) dot += v[i] * centres[p][i];
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * centres[p][i];
      }
    }
    double norm = 0.0;
    for (double e : v) norm += e * e;
    norm = std::sqrt(norm);
    for (auto& e : v) e /= norm;
  }
  const double radius = spec.separation / std::sqrt(2.0);

  const auto n = static_cast<std::size_t>(spec.n);
  std::vector<double> xs(n * dim);
  std::vector<std::int32_t> ys(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % k;
    ys[i] = static_cast<std::int32_t>(c);
    for (std::size_t j = 0; j < dim; ++j) xs[i * dim + j] = radius * centres[c][j] + rng.normal();
  }
  split_into(ds, xs, ys, n, spec.seed);
  return ds;
}

IdxArray parse_idx(std::span<const std::uint8_t> bytes) {
  require(bytes.size() >= 4, ErrorCode::kParse, "idx: truncated magic at byte offset ", bytes.size());
  require(bytes[0] == 0 && bytes[1] == 0, ErrorCode::kParse,
          "idx: bad magic, expected two zero bytes at byte offset 0");
  IdxArray out;
  out.type_code = bytes[2];
  require(out.type_code == 0x08, ErrorCode::kParse, "idx: unsupported element type 0x", std::hex,
          static_cast<int>(out.type_code), std::dec, " at byte offset 2");
  const std::size_t ndims = bytes[3];
  require(ndims >= 1, ErrorCode::kParse, "idx: zero dimensions at byte offset 3");
  const std::size_t header = 4 + 4 * ndims;
  require(bytes.size() >= header, ErrorCode::kParse, "idx: truncated dimension table at byte offset ",
          bytes.size());
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    const std::uint32_t dim = read_be32(bytes, 4 + 4 * i);
    require(dim > 0, ErrorCode::kParse, "idx: zero extent at byte offset ", 4 + 4 * i);
    out.dims.push_back(dim);
    total *= dim;
  }
  require(bytes.size() - header >= total, ErrorCode::kParse, "idx: expected ", total,
          " data bytes but input ends at byte offset ", bytes.size());
  require(bytes.size() - header == total, ErrorCode::kParse, "idx: ", bytes.size() - header - total,
          " trailing bytes at byte offset ", header + total);
  out.values.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return out;
}

IdxArray read_idx_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "idx: cannot open ", path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path + ": " + e.what());
  }
}

Dataset load_idx(const IdxSpec& spec) {
  auto read_pair = [](const std::string& images, const std::string& labels, std::vector<double>& xs,
                      std::vector<std::int32_t>& ys, Shape& sample) {
    IdxArray img = read_idx_file(images);
    IdxArray lab = read_idx_file(labels);
    require(img.dims.size() == 3, ErrorCode::kParse, images, ": expected 3-D image array (magic 0x00000803)");
    require(lab.dims.size() == 1, ErrorCode::kParse, labels, ": expected 1-D label array (magic 0x00000801)");
    require(img.dims[0] == lab.dims[0], ErrorCode::kParse, "idx: ", img.dims[0], " images but ",
            lab.dims[0], " labels");
    sample = {1, img.dims[1], img.dims[2]};
    xs.assign(img.values.begin(), img.values.end());
    ys.assign(lab.values.begin(), lab.values.end());
  };

  Dataset ds;
  ds.name = "idx";
  std::vector<double> xs;
  std::vector<std::int32_t> ys;
  read_pair(spec.train_images, spec.train_labels, xs, ys, ds.sample_shape);

  std::vector<double> test_xs;
  std::vector<std::int32_t> test_ys;
  if (!spec.test_images.empty()) {
    Shape test_sample;
    read_pair(spec.test_images, spec.test_labels, test_xs, test_ys, test_sample);
    require(test_sample == ds.sample_shape, ErrorCode::kParse, "idx: train/test image sizes differ");
  }

  double mean = 0.0, sq = 0.0;
  for (double v : xs) mean += v;
  mean /= static_cast<double>(xs.size());
  for (double v : xs) sq += (v - mean) * (v - mean);
  const double sd = std::sqrt(sq / static_cast<double>(xs.size()));
  const double inv = sd > 0.0 ? 1.0 / sd : 1.0;
  for (auto& v : xs) v = (v - mean) * inv;
  for (auto& v : test_xs) v = (v - mean) * inv;

  int max_label = 0;
  for (auto y : ys) max_label = std::max(max_label, static_cast<int>(y));
  for (auto y : test_ys) max_label = std::max(max_label, static_cast<int>(y));
  ds.num_classes = max_label + 1;

  if (test_ys.empty()) {
    split_into(ds, xs, ys, ys.size(), spec.seed);
  } else {
    ds.train_x = Tensor(batch_shape(ds.sample_shape, ys.size()), std::move(xs));
    ds.train_y = std::move(ys);
    ds.test_x = Tensor(batch_shape(ds.sample_shape, test_ys.size()), std::move(test_xs));
    ds.test_y = std::move(test_ys);
  }
  return ds;
}

Dataset load_dataset(const std::string& spec) {
  const auto colon = spec.find(':');
  const std::string kind = spec.substr(0, colon);
  const std::string rest = colon == std::string::npos ? "" : spec.substr(colon + 1);
  if (kind == "blobs") {
    BlobsSpec b;
    for (const auto& [key, value] : parse_kv(rest)) {
      try {
        if (key == "classes") b.classes = std::stoi(value);
        else if (key == "dim") b.dim = std::stoi(value);
        else if (key == "n") b.n = std::stoi(value);
        else if (key == "seed") b.seed = std::stoull(value);
        else if (key == "sep") b.separation = std::stod(value);
        else if (key == "image") {
          Shape s;
          std::stringstream ss(value);
          std::string part;
          while (std::getline(ss, part, 'x')) s.push_back(std::stoll(part));
          b.image_shape = s;
        } else {
          fail(ErrorCode::kParse, "blobs spec: unknown key '", key, "'");
        }
      } catch (const std::logic_error&) {
        fail(ErrorCode::kParse, "blobs spec: bad value '", value, "' for ", key);
      }
    }
    return make_blobs(b);
  }
  if (kind == "idx") {
    std::vector<std::string> parts;
    std::stringstream ss(rest);
    std::string part;
    while (std::getline(ss, part, ',')) parts.push_back(part);
    require(parts.size() == 2 || parts.size() == 4, ErrorCode::kParse,
            "idx spec: expected 2 or 4 comma-separated paths");
    IdxSpec s{parts[0], parts[1], parts.size() == 4 ? parts[2] : "",
              parts.size() == 4 ? parts[3] : "", 7};
    return load_idx(s);
  }
  fail(ErrorCode::kParse, "unknown dataset kind '", kind, "'");
}

BatchStream::BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, Stream stream)
    : data_(&data), batch_size_(batch_size), seed_(seed), stream_(stream) {
  require(batch_size > 0, ErrorCode::kInvalidArgument, "batch size must be positive");
  require(data.train_size() >= batch_size, ErrorCode::kInvalidArgument, "batch size ", batch_size,
          " exceeds training set of ", data.train_size());
  steps_per_epoch_ = data.train_size() / batch_size;
}

Batch BatchStream::batch(std::uint64_t step) {
  const std::uint64_t epoch = step / steps_per_epoch_;
  if (!epoch_ || *epoch_ != epoch) {
    order_.resize(data_->train_size());
    std::iota(order_.begin(), order_.end(), 0);
    Rng rng(seed_, stream_, epoch);
    std::shuffle(order_.begin(), order_.end(), rng.engine());
    epoch_ = epoch;
  }
  const std::size_t first = static_cast<std::size_t>(step % steps_per_epoch_) * batch_size_;
  return data_->train_batch(std::span<const std::size_t>(order_).subspan(first, batch_size_));
}

void augment(Batch& batch, Rng& rng) {
  const Shape& s = batch.x.shape();
  if (s.size() != 4) return;
  const std::int64_t n = s[0], c = s[1], h = s[2], w = s[3];
  Tensor out(s, 0.0);
  for (std::int64_t i = 0; i < n; ++i) {
    const bool flip = rng.below(2) == 1;
    const std::int64_t dy = static_cast<std::int64_t>(rng.below(5)) - 2;
    const std::int64_t dx = static_cast<std::int64_t>(rng.below(5)) - 2;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t y = 0; y < h; ++y) {
        const std::int64_t sy = y - dy;
        if (sy < 0 || sy >= h) continue;
        for (std::int64_t x = 0; x < w; ++x) {
          std::int64_t sx = x - dx;
          if (sx < 0 || sx >= w) continue;
          if (flip) sx = w - 1 - sx;
          out[static_cast<std::size_t>(((i * c + ch) * h + y) * w + x)] =
              batch.x[static_cast<std::size_t>(((i * c + ch) * h + sy) * w + sx)];
        }
      }
    }
  }
  batch.x = std::move(out);
}

}  // namespace cts
