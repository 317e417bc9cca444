#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mce/pngio.hpp"
#include "mce/rng.hpp"
#include "mce/tensor.hpp"

namespace mce {

constexpr int kMnistSide = 28;
constexpr int kMnistPixels = kMnistSide * kMnistSide;

// 28x28 grayscale intensities in [0, 1].
struct GrayImage {
  std::array<float, kMnistPixels> pixels;
  float at(int r, int c) const { return pixels[static_cast<size_t>(r) * kMnistSide + c]; }
};

struct MnistData {
  std::vector<GrayImage> images;
  std::vector<int> labels;
};

// Parses the standard IDX pair (big-endian headers, magic 0x803/0x801) and
// scales intensities by 1/255. Malformed input raises errors naming the file
// and the byte offset of the problem.
MnistData load_mnist(const std::string& images_path, const std::string& labels_path);

void gunzip_file(const std::string& src, const std::string& dst);

using Rgb = std::array<double, 3>;

struct Palette {
  std::vector<Rgb> colors;
  // Split only: per super class, ordered pairs of color indices.
  std::vector<std::vector<std::pair<int, int>>> class_pairs;
};

Rgb hsv_to_rgb(double hue, double sat, double val);

Palette background_palette();  // 10 evenly spaced hues, order = label order
Palette patch_palette();
// 8 colors; 2 pairs per super class arranged so every color appears in the
// pairs of two different classes (a single stripe alone is uninformative).
Palette split_palette();

enum class BiasKind { Background, Patch, Split };
std::string bias_name(BiasKind kind);
BiasKind parse_bias(const std::string& name);
int bias_num_classes(BiasKind kind);

// Fraction of examples whose modification matches the label in biased splits.
constexpr double kBiasRate = 0.9;

// Intensity-as-alpha compositing of a colored background under the white
// digit: out = g * (1,1,1) + (1-g) * color.
Tensor apply_background(const GrayImage& img, int mod_index, const Palette& palette);

// 5x5 cell grid via the per-pixel map cell(x) = floor(x*5/28); the upper-left
// cell takes color[mod_index], every other cell an independent random color.
Tensor apply_patch(const GrayImage& img, int mod_index, const Palette& palette, Rng& rng);

// Row-major 5x5 cell index of a pixel.
int patch_cell(int row, int col);

// Vertical stripes of widths 9/10/9; a color pair drawn from the class's pair
// list colors the outer stripes, the center stripe is colored randomly.
Tensor apply_split(const GrayImage& img, int mod_index, const Palette& palette, Rng& rng);

// One synthesized split, stored struct-of-arrays.
struct ExampleSet {
  Tensor images;                  // [N, 3, 28, 28]
  std::vector<int> labels;        // task classes
  std::vector<int> applied_mod;   // modification actually applied
  std::vector<uint8_t> biased;    // applied_mod == modification(label)
  std::vector<int> mnist_indices; // underlying pool indices (disjoint across splits)

  int size() const { return static_cast<int>(labels.size()); }
  Tensor image_slice(int start, int count) const;
};

struct BundleSizes {
  int train_per_class = 200;
  int ood_dev_per_class = 1000;
  int ood_test_per_class = 1000;
  int id_test_per_class = 1000;
};

struct DatasetBundle {
  ExampleSet train, ood_dev, ood_test, id_test;
  BiasKind bias_kind = BiasKind::Background;
  int num_classes = 10;
  uint64_t seed = 0;
};

// Builds the four disjoint splits. Train and id_test apply the label's
// modification with probability 0.9 and a uniformly random different one
// otherwise; ood splits draw modifications uniformly. Split restricts to
// digits 1-8 relabelled to four super classes.
DatasetBundle synthesize(BiasKind kind, const MnistData& pool, const BundleSizes& sizes,
                         uint64_t seed);

// Deterministic procedural grayscale pool (blobby glyph per class). Stands in
// for MNIST in data-free tests; the bias constructions are unaffected by the
// underlying image content.
MnistData synthetic_pool(int per_class, uint64_t seed);

// Per-class rows of train examples followed by OOD examples, for eyeballing.
RgbImage render_sample_grid(const DatasetBundle& bundle, int per_class);

}  // namespace mce
