#include "mce/datasets.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "mce/errors.hpp"

namespace mce {

namespace {

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

uint32_t be32(const std::vector<uint8_t>& buf, size_t offset, const std::string& path) {
  if (offset + 4 > buf.size()) {
    throw IoError(path + ": truncated at offset " + std::to_string(buf.size()) +
                  " (needed 4 bytes at offset " + std::to_string(offset) + ")");
  }
  return (static_cast<uint32_t>(buf[offset]) << 24) | (static_cast<uint32_t>(buf[offset + 1]) << 16) |
         (static_cast<uint32_t>(buf[offset + 2]) << 8) | static_cast<uint32_t>(buf[offset + 3]);
}

}  // namespace

MnistData load_mnist(const std::string& images_path, const std::string& labels_path) {
  const auto ibuf = read_file(images_path);
  const auto lbuf = read_file(labels_path);

  if (be32(ibuf, 0, images_path) != 0x00000803u) {
    throw IoError(images_path + ": bad magic at offset 0 (expected 0x00000803)");
  }
  if (be32(lbuf, 0, labels_path) != 0x00000801u) {
    throw IoError(labels_path + ": bad magic at offset 0 (expected 0x00000801)");
  }
  const uint32_t n_images = be32(ibuf, 4, images_path);
  const uint32_t rows = be32(ibuf, 8, images_path);
  const uint32_t cols = be32(ibuf, 12, images_path);
  const uint32_t n_labels = be32(lbuf, 4, labels_path);
  if (rows != kMnistSide || cols != kMnistSide) {
    throw DataError(images_path + ": expected 28x28 images, found " + std::to_string(rows) + "x" +
                    std::to_string(cols));
  }
  if (n_images != n_labels) {
    throw DataError("image count " + std::to_string(n_images) + " does not match label count " +
                    std::to_string(n_labels));
  }
  const size_t need_i = 16 + static_cast<size_t>(n_images) * kMnistPixels;
  if (ibuf.size() < need_i) {
    throw IoError(images_path + ": truncated at offset " + std::to_string(ibuf.size()) +
                  " (payload ends at " + std::to_string(need_i) + ")");
  }
  const size_t need_l = 8 + static_cast<size_t>(n_labels);
  if (lbuf.size() < need_l) {
    throw IoError(labels_path + ": truncated at offset " + std::to_string(lbuf.size()) +
                  " (payload ends at " + std::to_string(need_l) + ")");
  }

  MnistData data;
  data.images.resize(n_images);
  data.labels.resize(n_images);
  for (uint32_t i = 0; i < n_images; ++i) {
    const uint8_t* src = ibuf.data() + 16 + static_cast<size_t>(i) * kMnistPixels;
    auto& img = data.images[i].pixels;
    for (int p = 0; p < kMnistPixels; ++p) img[static_cast<size_t>(p)] = src[p] / 255.0f;
    const uint8_t y = lbuf[8 + i];
    if (y > 9) throw DataError(labels_path + ": label " + std::to_string(y) + " out of range");
    data.labels[i] = y;
  }
  return data;
}

void gunzip_file(const std::string& src, const std::string& dst) {
  gzFile in = gzopen(src.c_str(), "rb");
  if (in == nullptr) throw IoError("cannot open " + src);
  std::FILE* out = std::fopen(dst.c_str(), "wb");
  if (out == nullptr) {
    gzclose(in);
    throw IoError("cannot create " + dst);
  }
  std::vector<char> buf(1 << 16);
  int n;
  while ((n = gzread(in, buf.data(), static_cast<unsigned>(buf.size()))) > 0) {
    if (std::fwrite(buf.data(), 1, static_cast<size_t>(n), out) != static_cast<size_t>(n)) {
      std::fclose(out);
      gzclose(in);
      throw IoError("short write to " + dst);
    }
  }
  const bool read_error = n < 0;
  std::fclose(out);
  gzclose(in);
  if (read_error) throw IoError("decompression of " + src + " failed");
}

Rgb hsv_to_rgb(double hue, double sat, double val) {
  const double h = (hue - std::floor(hue)) * 6.0;
  const int i = static_cast<int>(h);
  const double f = h - i;
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  switch (i % 6) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

Palette background_palette() {
  Palette pal;
  for (int k = 0; k < 10; ++k) pal.colors.push_back(hsv_to_rgb(k / 10.0, 1.0, 1.0));
  return pal;
}

Palette patch_palette() { return background_palette(); }

Palette split_palette() {
  Palette pal;
  for (int k = 0; k < 8; ++k) pal.colors.push_back(hsv_to_rgb(k / 8.0, 1.0, 1.0));
  // Every color index appears in the pairs of exactly two different classes.
  pal.class_pairs = {
      {{0, 1}, {4, 5}},
      {{1, 2}, {5, 6}},
      {{2, 3}, {6, 7}},
      {{3, 0}, {7, 4}},
  };
  return pal;
}

std::string bias_name(BiasKind kind) {
  switch (kind) {
    case BiasKind::Background: return "background";
    case BiasKind::Patch: return "patch";
    case BiasKind::Split: return "split";
  }
  return "?";
}

BiasKind parse_bias(const std::string& name) {
  if (name == "background") return BiasKind::Background;
  if (name == "patch") return BiasKind::Patch;
  if (name == "split") return BiasKind::Split;
  throw ConfigError("unknown bias kind: " + name);
}

int bias_num_classes(BiasKind kind) { return kind == BiasKind::Split ? 4 : 10; }

namespace {

void check_mod(int mod_index, size_t n_colors) {
  if (mod_index < 0 || static_cast<size_t>(mod_index) >= n_colors) {
    throw ConfigError("modification index out of range");
  }
}

inline void blend_pixel(Tensor& out, int r, int c, double g, const Rgb& color) {
  for (int ch = 0; ch < 3; ++ch) {
    out[(static_cast<int64_t>(ch) * kMnistSide + r) * kMnistSide + c] =
        g + (1.0 - g) * color[static_cast<size_t>(ch)];
  }
}

}  // namespace

Tensor apply_background(const GrayImage& img, int mod_index, const Palette& palette) {
  check_mod(mod_index, palette.colors.size());
  const Rgb& color = palette.colors[static_cast<size_t>(mod_index)];
  Tensor out({3, kMnistSide, kMnistSide});
  for (int r = 0; r < kMnistSide; ++r) {
    for (int c = 0; c < kMnistSide; ++c) blend_pixel(out, r, c, img.at(r, c), color);
  }
  return out;
}

int patch_cell(int row, int col) { return (row * 5 / kMnistSide) * 5 + col * 5 / kMnistSide; }

Tensor apply_patch(const GrayImage& img, int mod_index, const Palette& palette, Rng& rng) {
  check_mod(mod_index, palette.colors.size());
  // Cell colors drawn up front in row-major cell order.
  std::array<Rgb, 25> cell_colors;
  cell_colors[0] = palette.colors[static_cast<size_t>(mod_index)];
  for (int cell = 1; cell < 25; ++cell) {
    cell_colors[static_cast<size_t>(cell)] =
        palette.colors[static_cast<size_t>(rng.below(palette.colors.size()))];
  }
  Tensor out({3, kMnistSide, kMnistSide});
  for (int r = 0; r < kMnistSide; ++r) {
    for (int c = 0; c < kMnistSide; ++c) {
      blend_pixel(out, r, c, img.at(r, c), cell_colors[static_cast<size_t>(patch_cell(r, c))]);
    }
  }
  return out;
}

Tensor apply_split(const GrayImage& img, int mod_index, const Palette& palette, Rng& rng) {
  if (mod_index < 0 || static_cast<size_t>(mod_index) >= palette.class_pairs.size()) {
    throw ConfigError("modification index out of range");
  }
  const auto& pairs = palette.class_pairs[static_cast<size_t>(mod_index)];
  const auto& pair = pairs[static_cast<size_t>(rng.below(pairs.size()))];
  const Rgb left = palette.colors[static_cast<size_t>(pair.first)];
  const Rgb right = palette.colors[static_cast<size_t>(pair.second)];
  const Rgb center = palette.colors[static_cast<size_t>(rng.below(palette.colors.size()))];
  Tensor out({3, kMnistSide, kMnistSide});
  for (int r = 0; r < kMnistSide; ++r) {
    for (int c = 0; c < kMnistSide; ++c) {
      const Rgb& color = c < 9 ? left : (c < 19 ? center : right);
      blend_pixel(out, r, c, img.at(r, c), color);
    }
  }
  return out;
}

Tensor ExampleSet::image_slice(int start, int count) const {
  const int64_t stride = 3 * kMnistPixels;
  return Tensor({count, 3, kMnistSide, kMnistSide},
                std::vector<double>(images.data.begin() + start * stride,
                                    images.data.begin() + (start + count) * stride));
}

namespace {

struct PoolView {
  std::vector<std::vector<int>> per_class;  // pool indices per task class
  const MnistData* pool;
};

PoolView classify_pool(BiasKind kind, const MnistData& pool, int num_classes) {
  PoolView view;
  view.pool = &pool;
  view.per_class.resize(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < pool.labels.size(); ++i) {
    const int digit = pool.labels[i];
    if (kind == BiasKind::Split) {
      if (digit < 1 || digit > 8) continue;
      view.per_class[static_cast<size_t>((digit - 1) / 2)].push_back(static_cast<int>(i));
    } else {
      view.per_class[static_cast<size_t>(digit)].push_back(static_cast<int>(i));
    }
  }
  return view;
}

Tensor render(BiasKind kind, const GrayImage& img, int mod, const Palette& pal, Rng& rng) {
  switch (kind) {
    case BiasKind::Background: return apply_background(img, mod, pal);
    case BiasKind::Patch: return apply_patch(img, mod, pal, rng);
    case BiasKind::Split: return apply_split(img, mod, pal, rng);
  }
  throw ConfigError("unknown bias kind");
}

ExampleSet build_split(BiasKind kind, const MnistData& pool, const Palette& pal,
                       const std::vector<std::vector<int>>& index_slices, bool biased_draw,
                       int num_classes, Rng& rng) {
  int total = 0;
  for (const auto& s : index_slices) total += static_cast<int>(s.size());

  ExampleSet set;
  set.images = Tensor({total, 3, kMnistSide, kMnistSide});
  set.labels.reserve(static_cast<size_t>(total));
  set.applied_mod.reserve(static_cast<size_t>(total));
  set.biased.reserve(static_cast<size_t>(total));
  set.mnist_indices.reserve(static_cast<size_t>(total));

  int row = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (int pool_idx : index_slices[static_cast<size_t>(c)]) {
      int mod;
      if (biased_draw) {
        if (rng.uniform01() < kBiasRate) {
          mod = c;
        } else {
          // A different, uniformly random modification.
          const int other = static_cast<int>(rng.below(static_cast<uint64_t>(num_classes - 1)));
          mod = other >= c ? other + 1 : other;
        }
      } else {
        mod = static_cast<int>(rng.below(static_cast<uint64_t>(num_classes)));
      }
      const Tensor img = render(kind, pool.images[static_cast<size_t>(pool_idx)], mod, pal, rng);
      std::copy(img.data.begin(), img.data.end(),
                set.images.data.begin() + static_cast<int64_t>(row) * 3 * kMnistPixels);
      set.labels.push_back(c);
      set.applied_mod.push_back(mod);
      set.biased.push_back(mod == c ? 1 : 0);
      set.mnist_indices.push_back(pool_idx);
      ++row;
    }
  }
  return set;
}

}  // namespace

DatasetBundle synthesize(BiasKind kind, const MnistData& pool, const BundleSizes& sizes,
                         uint64_t seed) {
  const int C = bias_num_classes(kind);
  const Palette pal = kind == BiasKind::Split ? split_palette()
                      : kind == BiasKind::Patch ? patch_palette()
                                                : background_palette();
  PoolView view = classify_pool(kind, pool, C);

  const int need =
      sizes.train_per_class + sizes.ood_dev_per_class + sizes.ood_test_per_class +
      sizes.id_test_per_class;
  // Four disjoint contiguous slices of each class's shuffled pool.
  std::vector<std::vector<int>> train_idx(static_cast<size_t>(C)),
      dev_idx(static_cast<size_t>(C)), oodtest_idx(static_cast<size_t>(C)),
      idtest_idx(static_cast<size_t>(C));
  for (int c = 0; c < C; ++c) {
    auto& pool_c = view.per_class[static_cast<size_t>(c)];
    if (static_cast<int>(pool_c.size()) < need) {
      throw DataError("class " + std::to_string(c) + " has " + std::to_string(pool_c.size()) +
                      " pool images, need " + std::to_string(need));
    }
    Rng shuffle_rng(derive_seed(seed, "pool", static_cast<uint64_t>(c)));
    shuffle_rng.shuffle(pool_c);
    auto it = pool_c.begin();
    train_idx[static_cast<size_t>(c)].assign(it, it + sizes.train_per_class);
    it += sizes.train_per_class;
    dev_idx[static_cast<size_t>(c)].assign(it, it + sizes.ood_dev_per_class);
    it += sizes.ood_dev_per_class;
    oodtest_idx[static_cast<size_t>(c)].assign(it, it + sizes.ood_test_per_class);
    it += sizes.ood_test_per_class;
    idtest_idx[static_cast<size_t>(c)].assign(it, it + sizes.id_test_per_class);
  }

  DatasetBundle bundle;
  bundle.bias_kind = kind;
  bundle.num_classes = C;
  bundle.seed = seed;
  Rng rng_train(derive_seed(seed, "examples", 0));
  Rng rng_dev(derive_seed(seed, "examples", 1));
  Rng rng_ood(derive_seed(seed, "examples", 2));
  Rng rng_id(derive_seed(seed, "examples", 3));
  bundle.train = build_split(kind, pool, pal, train_idx, /*biased_draw=*/true, C, rng_train);
  bundle.ood_dev = build_split(kind, pool, pal, dev_idx, /*biased_draw=*/false, C, rng_dev);
  bundle.ood_test = build_split(kind, pool, pal, oodtest_idx, /*biased_draw=*/false, C, rng_ood);
  bundle.id_test = build_split(kind, pool, pal, idtest_idx, /*biased_draw=*/true, C, rng_id);
  return bundle;
}

MnistData synthetic_pool(int per_class, uint64_t seed) {
  MnistData data;
  data.images.reserve(static_cast<size_t>(per_class) * 10);
  data.labels.reserve(static_cast<size_t>(per_class) * 10);
  for (int c = 0; c < 10; ++c) {
    Rng rng(derive_seed(seed, "glyph", static_cast<uint64_t>(c)));
    for (int i = 0; i < per_class; ++i) {
      GrayImage img{};
      // Three blobs at class-anchored positions with per-image jitter.
      for (int blob = 0; blob < 3; ++blob) {
        const double cx = 6.0 + 16.0 * ((c * 3 + blob * 7) % 10) / 9.0 + rng.uniform(-2.0, 2.0);
        const double cy = 6.0 + 16.0 * ((c * 5 + blob * 3) % 10) / 9.0 + rng.uniform(-2.0, 2.0);
        const double s2 = 2.0 * std::pow(2.0 + rng.uniform01(), 2);
        for (int r = 0; r < kMnistSide; ++r) {
          for (int col = 0; col < kMnistSide; ++col) {
            const double d2 = (r - cy) * (r - cy) + (col - cx) * (col - cx);
            auto& px = img.pixels[static_cast<size_t>(r) * kMnistSide + col];
            px = static_cast<float>(std::min(1.0, px + std::exp(-d2 / s2)));
          }
        }
      }
      data.images.push_back(img);
      data.labels.push_back(c);
    }
  }
  return data;
}

RgbImage render_sample_grid(const DatasetBundle& bundle, int per_class) {
  const int C = bundle.num_classes;
  const int cell = kMnistSide + 2;
  const int cols = per_class * 2;  // train block then ood block
  RgbImage grid;
  grid.width = cols * cell;
  grid.height = C * cell;
  grid.pixels.assign(static_cast<size_t>(grid.width) * grid.height * 3, 32);

  auto blit = [&](const ExampleSet& set, int row_idx, int grid_r, int grid_c) {
    for (int r = 0; r < kMnistSide; ++r) {
      for (int c = 0; c < kMnistSide; ++c) {
        const int y = grid_r * cell + 1 + r, x = grid_c * cell + 1 + c;
        for (int ch = 0; ch < 3; ++ch) {
          const double v = set.images.data[((static_cast<int64_t>(row_idx) * 3 + ch) * kMnistSide + r) *
                                               kMnistSide +
                                           c];
          grid.pixels[(static_cast<size_t>(y) * grid.width + x) * 3 + static_cast<size_t>(ch)] =
              static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
        }
      }
    }
  };

  for (int c = 0; c < C; ++c) {
    int placed = 0;
    for (int i = 0; i < bundle.train.size() && placed < per_class; ++i) {
      if (bundle.train.labels[static_cast<size_t>(i)] == c) blit(bundle.train, i, c, placed++);
    }
    placed = 0;
    for (int i = 0; i < bundle.ood_test.size() && placed < per_class; ++i) {
      if (bundle.ood_test.labels[static_cast<size_t>(i)] == c) {
        blit(bundle.ood_test, i, c, per_class + placed++);
      }
    }
  }
  return grid;
}

}  // namespace mce
