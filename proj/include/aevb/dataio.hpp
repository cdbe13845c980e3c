#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aevb/baselines.hpp"
#include "aevb/networks.hpp"
#include "aevb/numkit.hpp"
#include "aevb/train.hpp"

namespace aevb {

// Rows [0, train_end) are the training split, [train_end, N) the test split.
struct Dataset {
  Matrix x;  // N x D, values in [0, 1] for loaded images
  std::string name;
  std::size_t train_end = 0;
  std::size_t image_h = 0, image_w = 0;  // 0 when unknown
  std::vector<std::uint8_t> labels;      // empty unless a label file was given

  std::size_t size() const noexcept { return x.rows(); }
  Matrix train() const;
  Matrix test() const;
};

// Makes the last test_count rows the test split.
void split_tail(Dataset& ds, std::size_t test_count);

// Values above the threshold become 1, the rest 0.
void binarize(Dataset& ds, double threshold);

// ---- IDX ----

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<std::uint8_t> pixels;  // count * rows * cols
};

IdxImages parse_idx_images(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> parse_idx_labels(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_idx_images(const IdxImages& images);
std::vector<std::uint8_t> encode_idx_labels(std::span<const std::uint8_t> labels);

// Pixels divided by 255. All rows start in the training split.
Dataset load_idx(const std::string& image_path, const std::optional<std::string>& label_path = {});

// ---- CSV: one image per line, comma-separated values 0-255 ----

// Image shape defaults to 28 x 20 for 560 columns, s x s for s^2 columns and
// 1 x D otherwise.
Dataset parse_csv_dataset(const std::string& text, const std::string& name = "csv");
Dataset load_csv_dataset(const std::string& path);

// IDX when the file starts with an IDX image magic, CSV otherwise.
Dataset load_dataset(const std::string& path);

// "synthetic:linear:<n>": 10-dimensional data from a fixed random 2-latent
// linear-Gaussian model. "synthetic:binary:<n>": 4 x 4 binary images drawn
// from a fixed random 2-latent Bernoulli decoder.
bool is_synthetic_spec(const std::string& spec);
Dataset synthetic_dataset(const std::string& spec, std::uint64_t seed);

std::pair<std::size_t, std::size_t> infer_image_shape(std::size_t data_dim);

// ---- checkpoints ----

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  TrainState state;
  Algorithm algorithm = Algorithm::Aevb;
  std::size_t image_h = 0, image_w = 0;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
// Written to a temporary file first, then renamed over path.
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

// ---- images ----

struct GrayImage {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

// round(255 * v) with ties to even, v clamped to [0, 1].
std::uint8_t to_pixel(double v);

// Tiles the rows of images (each h * w) into a grid with the given number of
// columns; unused cells of the last row stay 0.
GrayImage tile_images(const Matrix& images, std::size_t h, std::size_t w, std::size_t columns);

// Binary PGM (P5, maxval 255).
std::vector<std::uint8_t> encode_pgm(const GrayImage& img);
void write_pgm(const std::string& path, const GrayImage& img);

// Latent grid for a k x k manifold: row i, column j holds
// (Phi^-1((j + 1/2) / k), Phi^-1((i + 1/2) / k)).
Matrix manifold_latents(std::size_t k);

// Decoder means over the manifold grid, tiled k x k. Requires J == 2.
GrayImage manifold_grid(const VaeModel& model, std::size_t k, std::size_t h, std::size_t w);

// Decoder means at n draws z ~ N(0, I), tiled with ceil(sqrt(n)) columns.
GrayImage sample_grid(const VaeModel& model, std::size_t n, std::size_t h, std::size_t w, Rng& rng);

// Whole-file helpers; throw std::runtime_error naming the path.
std::vector<std::uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace aevb
