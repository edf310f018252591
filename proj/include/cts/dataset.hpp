#ifndef CTS_DATASET_HPP_
#define CTS_DATASET_HPP_

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cts/rng.hpp"
#include "cts/tensor.hpp"

namespace cts {

struct Batch {
  Tensor x;  // [N, ...sample_shape]
  std::vector<std::int32_t> y;

  std::size_t size() const { return y.size(); }
};

struct Dataset {
  std::string name;
  Shape sample_shape;
  int num_classes = 0;
  Tensor train_x;
  std::vector<std::int32_t> train_y;
  Tensor test_x;
  std::vector<std::int32_t> test_y;

  std::size_t train_size() const { return train_y.size(); }
  std::size_t test_size() const { return test_y.size(); }

  Batch train_batch(std::span<const std::size_t> indices) const;
  Batch test_batch(std::size_t first, std::size_t count) const;
  Batch train_prefix(std::size_t count) const;
};

struct BlobsSpec {
  int classes = 4;
  int dim = 20;
  int n = 4000;
  std::uint64_t seed = 7;
  // Distance between any two class centres, in units of the per-coordinate
  // noise standard deviation.
  double separation = 10.0;
  // Optional [C,H,W] view of each sample (C*H*W == dim) for conv models.
  Shape image_shape;
};

// Gaussian clusters, deterministic in the spec, split 80/20 into train/test.
Dataset make_blobs(const BlobsSpec& spec);

// ---- IDX ----------------------------------------------------------------------

struct IdxArray {
  std::uint8_t type_code = 0;
  std::vector<std::int64_t> dims;
  std::vector<std::uint8_t> values;
};

// Parses an unsigned-byte IDX buffer (magic 0x00000801 / 0x00000803 and so
// on). Malformed input raises a parse error that names the byte offset.
IdxArray parse_idx(std::span<const std::uint8_t> bytes);
IdxArray read_idx_file(const std::string& path);

struct IdxSpec {
  std::string train_images;
  std::string train_labels;
  std::string test_images;  // empty: split the training files 80/20
  std::string test_labels;
  std::uint64_t seed = 7;
};

// Pixels are normalised to zero mean / unit variance using training
// statistics; samples get shape [1,H,W].
Dataset load_idx(const IdxSpec& spec);

// "blobs:classes=4,dim=20,n=4000,seed=7,sep=10,image=1x4x5" or
// "idx:train_images,train_labels[,test_images,test_labels]".
Dataset load_dataset(const std::string& spec);

// ---- batching ---------------------------------------------------------------------

// Deterministic minibatches addressed by step: step t lives in epoch
// t / steps_per_epoch, and every epoch is a fresh permutation drawn from
// (seed, stream, epoch). The trailing partial batch of an epoch is dropped.
class BatchStream {
 public:
  BatchStream(const Dataset& data, std::size_t batch_size, std::uint64_t seed, Stream stream);

  Batch batch(std::uint64_t step);
  std::size_t steps_per_epoch() const { return steps_per_epoch_; }

 private:
  const Dataset* data_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  Stream stream_;
  std::size_t steps_per_epoch_;
  std::optional<std::uint64_t> epoch_;
  std::vector<std::size_t> order_;
};

// Random horizontal flip and up-to-2-pixel shift for [N,C,H,W] batches; other
// ranks are returned unchanged.
void augment(Batch& batch, Rng& rng);

}  // namespace cts

#endif  // CTS_DATASET_HPP_
