#include <doctest.h>

#include <cmath>
#include <set>

#include "cts/dataset.hpp"
#include "cts/error.hpp"

using namespace cts;

namespace {

std::vector<std::uint8_t> idx_header(std::uint8_t type, const std::vector<std::uint32_t>& dims) {
  std::vector<std::uint8_t> out{0, 0, type, static_cast<std::uint8_t>(dims.size())};
  for (auto d : dims) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(d >> s));
  }
  return out;
}

}  // namespace

TEST_CASE("blobs are deterministic and balanced") {
  BlobsSpec spec;
  spec.n = 400;
  auto a = make_blobs(spec);
  auto b = make_blobs(spec);
  CHECK(a.train_x == b.train_x);
  CHECK(a.test_y == b.test_y);
  CHECK(a.train_size() == 320);
  CHECK(a.test_size() == 80);
  CHECK(a.sample_shape == Shape{20});
  std::set<std::int32_t> labels(a.train_y.begin(), a.train_y.end());
  CHECK(labels.size() == 4);

  spec.seed = 8;
  CHECK_FALSE(make_blobs(spec).train_x == a.train_x);
}

TEST_CASE("blob image view") {
  auto d = load_dataset("blobs:classes=3,dim=16,n=90,seed=1,sep=6,image=1x4x4");
  CHECK(d.sample_shape == Shape{1, 4, 4});
  CHECK(d.num_classes == 3);
  auto b = d.test_batch(0, 5);
  CHECK(b.x.shape() == Shape{5, 1, 4, 4});
  CHECK_THROWS_AS(load_dataset("blobs:dim=16,image=1x3x4"), Error);
  CHECK_THROWS_AS(load_dataset("csv:foo"), Error);
}

TEST_CASE("idx parsing") {
  auto bytes = idx_header(0x08, {10, 28, 28});
  bytes.resize(bytes.size() + 10 * 28 * 28, 7);
  auto arr = parse_idx(bytes);
  CHECK(arr.dims == std::vector<std::int64_t>{10, 28, 28});
  CHECK(arr.values.size() == 7840);

  auto truncated = bytes;
  truncated.pop_back();
  try {
    parse_idx(truncated);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kParse);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
  auto bad_magic = bytes;
  bad_magic[0] = 1;
  CHECK_THROWS_AS(parse_idx(bad_magic), Error);
  auto floats = idx_header(0x0D, {2});
  floats.resize(floats.size() + 8);
  CHECK_THROWS_AS(parse_idx(floats), Error);
}

TEST_CASE("batch stream") {
  BlobsSpec spec;
  spec.n = 100;  // 80 train
  auto d = make_blobs(spec);
  BatchStream s1(d, 16, 3, Stream::kTrainBatches);
  BatchStream s2(d, 16, 3, Stream::kTrainBatches);
  CHECK(s1.steps_per_epoch() == 5);
  auto b7 = s1.batch(7);
  s1.batch(0);
  CHECK(s1.batch(7).x == b7.x);
  CHECK(s2.batch(7).y == b7.y);

  // one epoch visits every example exactly once
  std::multiset<double> seen;
  for (std::uint64_t t = 0; t < 5; ++t) {
    auto b = s1.batch(t);
    for (std::size_t i = 0; i < b.size(); ++i) seen.insert(b.x[i * 20]);
  }
  std::multiset<double> all;
  for (std::size_t i = 0; i < d.train_size(); ++i) all.insert(d.train_x[i * 20]);
  CHECK(seen == all);
}

TEST_CASE("augment leaves flat batches alone") {
  auto d = make_blobs(BlobsSpec{});
  auto b = d.test_batch(0, 4);
  auto copy = b;
  Rng rng(1);
  augment(b, rng);
  CHECK(b.x == copy.x);
}
