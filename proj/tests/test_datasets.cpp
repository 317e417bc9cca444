#include <doctest.h>

#include <Eigen/Core>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "mce/datasets.hpp"
#include "mce/errors.hpp"

using namespace mce;
namespace fs = std::filesystem;

namespace {

std::string data_dir() {
  const char* env = std::getenv("MCE_DATA_DIR");
  return env != nullptr && env[0] != '\0' ? env : "data/mnist";
}

bool real_mnist_available() {
  return fs::exists(fs::path(data_dir()) / "train-images-idx3-ubyte") &&
         fs::exists(fs::path(data_dir()) / "train-labels-idx1-ubyte");
}

void put_be32(std::ofstream& out, uint32_t v) {
  const unsigned char bytes[4] = {static_cast<unsigned char>(v >> 24),
                                  static_cast<unsigned char>(v >> 16),
                                  static_cast<unsigned char>(v >> 8),
                                  static_cast<unsigned char>(v)};
  out.write(reinterpret_cast<const char*>(bytes), 4);
}

// Writes a tiny well-formed IDX pair under dir; n images of zeros.
void write_idx_pair(const fs::path& dir, int n_images, int n_labels) {
  std::ofstream img(dir / "images", std::ios::binary);
  put_be32(img, 0x803);
  put_be32(img, static_cast<uint32_t>(n_images));
  put_be32(img, 28);
  put_be32(img, 28);
  const std::vector<char> zeros(28 * 28, 0);
  for (int i = 0; i < n_images; ++i) img.write(zeros.data(), zeros.size());
  std::ofstream lab(dir / "labels", std::ios::binary);
  put_be32(lab, 0x801);
  put_be32(lab, static_cast<uint32_t>(n_labels));
  for (int i = 0; i < n_labels; ++i) lab.put(static_cast<char>(i % 10));
}

GrayImage constant_image(float g) {
  GrayImage img{};
  img.pixels.fill(g);
  return img;
}

}  // namespace

TEST_SUITE("biased_datasets") {

TEST_CASE("official training files load with the expected shape") {
  if (!real_mnist_available()) {
    MESSAGE("MNIST files not found under ", data_dir(), "; skipping");
    return;
  }
  const fs::path dir(data_dir());
  const MnistData data = load_mnist((dir / "train-images-idx3-ubyte").string(),
                                    (dir / "train-labels-idx1-ubyte").string());
  CHECK(data.images.size() == 60000);
  CHECK(data.labels.front() == 5);
  float lo = 1.0f, hi = 0.0f;
  for (int i = 0; i < 100; ++i) {
    for (float v : data.images[static_cast<size_t>(i)].pixels) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  CHECK(lo >= 0.0f);
  CHECK(hi <= 1.0f);
}

TEST_CASE("truncated files report the failing offset") {
  const fs::path dir = fs::temp_directory_path() / "mce_idx_trunc";
  fs::create_directories(dir);
  write_idx_pair(dir, 3, 3);
  // Chop the image payload short.
  fs::resize_file(dir / "images", 16 + 2 * 28 * 28 + 100);
  try {
    load_mnist((dir / "images").string(), (dir / "labels").string());
    FAIL("expected IoError");
  } catch (const IoError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("truncated at offset " + std::to_string(16 + 2 * 28 * 28 + 100)) !=
          std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("bad magic numbers are rejected") {
  const fs::path dir = fs::temp_directory_path() / "mce_idx_magic";
  fs::create_directories(dir);
  write_idx_pair(dir, 2, 2);
  {
    std::fstream f(dir / "images", std::ios::in | std::ios::out | std::ios::binary);
    f.put(static_cast<char>(0xff));
  }
  CHECK_THROWS_AS(load_mnist((dir / "images").string(), (dir / "labels").string()), IoError);
  fs::remove_all(dir);
}

TEST_CASE("image and label counts must agree") {
  const fs::path dir = fs::temp_directory_path() / "mce_idx_count";
  fs::create_directories(dir);
  write_idx_pair(dir, 2, 3);
  CHECK_THROWS_AS(load_mnist((dir / "images").string(), (dir / "labels").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("background on an all-black digit is a solid color plane") {
  const Palette pal = background_palette();
  const Tensor out = apply_background(constant_image(0.0f), 3, pal);
  for (int p = 0; p < kMnistPixels; ++p) {
    for (int ch = 0; ch < 3; ++ch) {
      CHECK(out.data[static_cast<size_t>(ch) * kMnistPixels + p] ==
            doctest::Approx(pal.colors[3][static_cast<size_t>(ch)]));
    }
  }
}

TEST_CASE("background behind an all-white digit stays white") {
  const Tensor out = apply_background(constant_image(1.0f), 7, background_palette());
  for (double v : out.data) CHECK(v == doctest::Approx(1.0));
}

TEST_CASE("background blend arithmetic at half intensity") {
  Palette pal;
  pal.colors = {{1.0, 0.0, 0.0}};
  const Tensor out = apply_background(constant_image(0.5f), 0, pal);
  CHECK(out.data[0] == doctest::Approx(0.75));                  // R
  CHECK(out.data[kMnistPixels] == doctest::Approx(0.5));        // G
  CHECK(out.data[2 * kMnistPixels] == doctest::Approx(0.5));    // B
}

TEST_CASE("patch cell map equals the per-pixel floor oracle") {
  for (int r = 0; r < kMnistSide; ++r) {
    for (int c = 0; c < kMnistSide; ++c) {
      const int cell_r = static_cast<int>(std::floor(r * 5.0 / 28.0));
      const int cell_c = static_cast<int>(std::floor(c * 5.0 / 28.0));
      CHECK(patch_cell(r, c) == cell_r * 5 + cell_c);
    }
  }
}

TEST_CASE("patch upper-left cell carries the modification color") {
  Rng rng(100);
  const Palette pal = patch_palette();
  const Tensor out = apply_patch(constant_image(0.0f), 4, pal, rng);
  for (int r = 0; r < 6; ++r) {
    for (int c = 0; c < 6; ++c) {
      REQUIRE(patch_cell(r, c) == 0);  // the 6x6 upper-left block
      for (int ch = 0; ch < 3; ++ch) {
        CHECK(out.data[(static_cast<size_t>(ch) * kMnistSide + r) * kMnistSide + c] ==
              doctest::Approx(pal.colors[4][static_cast<size_t>(ch)]));
      }
    }
  }
}

TEST_CASE("patch rendering is reproducible bit for bit") {
  const Palette pal = patch_palette();
  Rng a(555), b(555);
  const Tensor one = apply_patch(constant_image(0.3f), 2, pal, a);
  const Tensor two = apply_patch(constant_image(0.3f), 2, pal, b);
  CHECK(one.data == two.data);
}

TEST_CASE("split outer stripes always form a registered pair of the class") {
  const Palette pal = split_palette();
  Rng rng(777);
  for (int rep = 0; rep < 50; ++rep) {
    const int mod = rep % 4;
    const Tensor out = apply_split(constant_image(0.0f), mod, pal, rng);
    auto pixel_color = [&](int r, int c) {
      return Rgb{out.data[(0 * kMnistSide + r) * kMnistSide + c],
                 out.data[(1 * kMnistSide + r) * kMnistSide + c],
                 out.data[(2 * kMnistSide + r) * kMnistSide + c]};
    };
    const Rgb left = pixel_color(14, 0);
    const Rgb right = pixel_color(14, 27);
    bool found = false;
    for (const auto& [i, j] : pal.class_pairs[static_cast<size_t>(mod)]) {
      if (left == pal.colors[static_cast<size_t>(i)] &&
          right == pal.colors[static_cast<size_t>(j)]) {
        found = true;
      }
    }
    CHECK(found);
  }
}

TEST_CASE("split stripes have widths 9/10/9") {
  const Palette pal = split_palette();
  Rng rng(778);
  // Paint with a rigged palette of distinct colors to find the boundaries.
  const Tensor out = apply_split(constant_image(0.0f), 0, pal, rng);
  auto red_at = [&](int c) { return out.data[(0 * kMnistSide + 14) * kMnistSide + c]; };
  for (int c = 1; c < 9; ++c) CHECK(red_at(c) == red_at(0));
  for (int c = 10; c < 19; ++c) CHECK(red_at(c) == red_at(9));
  for (int c = 20; c < 28; ++c) CHECK(red_at(c) == red_at(19));
}

TEST_CASE("split center stripe color is class-independent (chi-square)") {
  const Palette pal = split_palette();
  const int draws_per_class = 2500;
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(4, 8);
  Rng rng(779);
  for (int mod = 0; mod < 4; ++mod) {
    for (int rep = 0; rep < draws_per_class; ++rep) {
      const Tensor out = apply_split(constant_image(0.0f), mod, pal, rng);
      const Rgb center = {out.data[(0 * kMnistSide + 14) * kMnistSide + 14],
                          out.data[(1 * kMnistSide + 14) * kMnistSide + 14],
                          out.data[(2 * kMnistSide + 14) * kMnistSide + 14]};
      for (int k = 0; k < 8; ++k) {
        if (center == pal.colors[static_cast<size_t>(k)]) counts(mod, k) += 1.0;
      }
    }
  }
  // Pearson independence statistic; df = (4-1)(8-1) = 21,
  // chi2(0.99, 21) = 38.93.
  const double total = counts.sum();
  double stat = 0.0;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 8; ++c) {
      const double expected = counts.row(r).sum() * counts.col(c).sum() / total;
      stat += (counts(r, c) - expected) * (counts(r, c) - expected) / expected;
    }
  }
  CHECK(stat < 38.93);
}

TEST_CASE("each split color appears in the pairs of at least two classes") {
  const Palette pal = split_palette();
  std::vector<std::set<int>> classes_using(pal.colors.size());
  for (size_t cls = 0; cls < pal.class_pairs.size(); ++cls) {
    for (const auto& [i, j] : pal.class_pairs[cls]) {
      classes_using[static_cast<size_t>(i)].insert(static_cast<int>(cls));
      classes_using[static_cast<size_t>(j)].insert(static_cast<int>(cls));
    }
  }
  for (const auto& users : classes_using) CHECK(users.size() >= 2);
}

TEST_CASE("palette colors are pairwise distinct and pairs are disjoint across classes") {
  for (const Palette& pal : {background_palette(), split_palette()}) {
    for (size_t i = 0; i < pal.colors.size(); ++i) {
      for (size_t j = i + 1; j < pal.colors.size(); ++j) {
        CHECK(pal.colors[i] != pal.colors[j]);
      }
    }
  }
  const Palette pal = split_palette();
  std::set<std::pair<int, int>> seen;
  for (const auto& pairs : pal.class_pairs) {
    for (const auto& p : pairs) {
      CHECK(seen.insert(p).second);  // no pair belongs to two classes
    }
  }
}

TEST_CASE("synthesize honors sizes, bias rate, and disjointness") {
  const MnistData pool = synthetic_pool(230, 1000);
  const BundleSizes sizes{100, 40, 40, 40};
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, sizes, 42);

  CHECK(bundle.train.size() == 1000);
  CHECK(bundle.ood_dev.size() == 400);
  CHECK(bundle.ood_test.size() == 400);
  CHECK(bundle.id_test.size() == 400);

  double biased = 0.0;
  for (uint8_t b : bundle.train.biased) biased += b;
  biased /= bundle.train.size();
  CHECK(biased > 0.86);
  CHECK(biased < 0.94);

  double ood_match = 0.0;
  for (int i = 0; i < bundle.ood_test.size(); ++i) {
    if (bundle.ood_test.applied_mod[static_cast<size_t>(i)] ==
        bundle.ood_test.labels[static_cast<size_t>(i)]) {
      ood_match += 1.0;
    }
  }
  ood_match /= bundle.ood_test.size();
  CHECK(ood_match > 0.04);
  CHECK(ood_match < 0.17);

  std::set<int> seen;
  for (const auto* set : {&bundle.train, &bundle.ood_dev, &bundle.ood_test, &bundle.id_test}) {
    for (int idx : set->mnist_indices) {
      CHECK(seen.insert(idx).second);  // no pool image reused across splits
    }
  }

  for (double v : bundle.train.images.data) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("synthesize is deterministic given the seed") {
  const MnistData pool = synthetic_pool(60, 1001);
  const BundleSizes sizes{20, 10, 10, 10};
  const DatasetBundle a = synthesize(BiasKind::Patch, pool, sizes, 7);
  const DatasetBundle b = synthesize(BiasKind::Patch, pool, sizes, 7);
  CHECK(a.train.images.data == b.train.images.data);
  CHECK(a.train.applied_mod == b.train.applied_mod);
  CHECK(a.ood_test.images.data == b.ood_test.images.data);
  const DatasetBundle c = synthesize(BiasKind::Patch, pool, sizes, 8);
  CHECK(a.train.images.data != c.train.images.data);
}

TEST_CASE("split restricts to digits 1-8 and relabels to four super classes") {
  const MnistData pool = synthetic_pool(130, 1002);
  const BundleSizes sizes{40, 20, 20, 20};
  const DatasetBundle bundle = synthesize(BiasKind::Split, pool, sizes, 9);
  CHECK(bundle.num_classes == 4);
  CHECK(bundle.train.size() == 160);
  for (int y : bundle.train.labels) {
    CHECK(y >= 0);
    CHECK(y <= 3);
  }
  for (int idx : bundle.train.mnist_indices) {
    const int digit = pool.labels[static_cast<size_t>(idx)];
    CHECK(digit >= 1);
    CHECK(digit <= 8);
  }
}

TEST_CASE("an undersized pool is a data error") {
  const MnistData pool = synthetic_pool(50, 1003);
  const BundleSizes sizes{100, 40, 40, 40};
  CHECK_THROWS_AS(synthesize(BiasKind::Background, pool, sizes, 1), DataError);
}

TEST_CASE("sample grid renders with the expected dimensions") {
  const MnistData pool = synthetic_pool(60, 1004);
  const DatasetBundle bundle = synthesize(BiasKind::Background, pool, {20, 10, 10, 10}, 2);
  const RgbImage grid = render_sample_grid(bundle, 4);
  CHECK(grid.width == 8 * 30);
  CHECK(grid.height == 10 * 30);
  CHECK(grid.pixels.size() == static_cast<size_t>(grid.width) * grid.height * 3);
}

}  // TEST_SUITE
