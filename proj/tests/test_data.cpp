#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <set>

#include "oracles.hpp"

using namespace deepcarve;
namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

void write_gray(const fs::path& p, std::uint8_t value, std::size_t side = 4) {
  fs::create_directories(p.parent_path());
  write_image(p, Image8{side, side, 1, std::vector<std::uint8_t>(side * side, value)});
}

// attributes dense/sunlit/rusty with one train image per class and two test images
void write_small_tree(const fs::path& root) {
  write_text(root / "attributes.txt", "dense\nsunlit\nrusty\n");
  write_gray(root / "train/dense/a.pgm", 10);
  write_gray(root / "train/sunlit/b.pgm", 20);
  write_gray(root / "train/rusty/c.pgm", 30);
  write_gray(root / "val/sunlit/v.pgm", 40);
  write_gray(root / "test/images/img7.pgm", 50);
  write_gray(root / "test/images/img8.pgm", 60);
  write_text(root / "test/labels.csv", "image_id,labels\nimg7, dense;sunlit\nimg8,rusty\n");
}

std::vector<std::string> files_under(const fs::path& root) {
  std::vector<std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.push_back(fs::relative(e.path(), root).string());
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

TEST(Load, SmallTree) {
  oracle::TempDir dir("load");
  write_small_tree(dir.path());
  const auto ds = load_dataset(dir.path());
  EXPECT_EQ(ds.num_classes(), 3u);
  EXPECT_EQ(ds.indices(Split::train).size(), 3u);
  EXPECT_EQ(ds.indices(Split::val).size(), 1u);
  const auto test = ds.indices(Split::test);
  ASSERT_EQ(test.size(), 2u);
  EXPECT_EQ(ds.items[test[0]].id, "test/img7");
  EXPECT_EQ(ds.items[test[0]].full_labels, (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(ds.items[test[1]].full_labels, (std::vector<std::size_t>{2}));
  const auto& first = ds.items[ds.indices(Split::train)[0]];
  EXPECT_EQ(*first.weak_label, 0u);
  EXPECT_EQ(first.image.shape(), (Shape{1, 4, 4}));
  EXPECT_EQ(first.image[0], 10.0 / 255.0);
}

TEST(Load, ImageUnderTwoClassDirs) {
  oracle::TempDir dir("overlap");
  write_small_tree(dir.path());
  write_gray(dir / "train/sunlit/a.pgm", 10);  // same image also filed as sunlit
  const auto ds = load_dataset(dir.path());
  std::vector<std::size_t> labels;
  for (auto i : ds.indices(Split::train))
    if (ds.items[i].id.ends_with("/a")) labels.push_back(*ds.items[i].weak_label);
  EXPECT_EQ(labels, (std::vector<std::size_t>{0, 1}));
}

TEST(Load, Errors) {
  {
    oracle::TempDir dir("unknown_attr");
    write_small_tree(dir.path());
    write_gray(dir / "train/shiny/x.pgm", 1);
    EXPECT_THROW(load_dataset(dir.path()), std::runtime_error);
  }
  {
    oracle::TempDir dir("unknown_label");
    write_small_tree(dir.path());
    write_text(dir / "test/labels.csv", "img7,dense;glossy\nimg8,rusty\n");
    EXPECT_THROW(load_dataset(dir.path()), std::runtime_error);
  }
  {
    oracle::TempDir dir("empty_class");
    write_small_tree(dir.path());
    fs::remove_all(dir / "train/rusty");
    try {
      load_dataset(dir.path());
      FAIL();
    } catch (const std::runtime_error& e) {
      EXPECT_NE(std::string(e.what()).find("rusty"), std::string::npos) << e.what();
    }
  }
  {
    oracle::TempDir dir("bad_image");
    write_small_tree(dir.path());
    write_text(dir / "train/dense/broken.pgm", "P5 garbage");
    EXPECT_THROW(load_dataset(dir.path()), std::runtime_error);
  }
  {
    oracle::TempDir dir("missing_row");
    write_small_tree(dir.path());
    write_text(dir / "test/labels.csv", "img7,dense\n");
    EXPECT_THROW(load_dataset(dir.path()), std::runtime_error);
  }
}

TEST(Synthetic, RoundTripIsExact) {
  for (std::size_t channels : {1u, 3u}) {
    SynthSpec spec;
    spec.channels = channels;
    spec.image_size = 12;
    spec.overlap = 0.5;
    spec.seed = 4;
    const auto ds = generate_synthetic(spec, SplitCounts{6, 2, 5});
    oracle::TempDir dir("roundtrip");
    write_dataset(ds, dir.path());
    const auto back = load_dataset(dir.path());
    ASSERT_EQ(back.items.size(), ds.items.size());
    EXPECT_EQ(back.attributes, ds.attributes);
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
      EXPECT_EQ(back.items[i].id, ds.items[i].id);
      EXPECT_EQ(back.items[i].split, ds.items[i].split);
      EXPECT_EQ(back.items[i].weak_label, ds.items[i].weak_label);
      EXPECT_EQ(back.items[i].full_labels, ds.items[i].full_labels);
      EXPECT_EQ(back.items[i].image, ds.items[i].image);
    }
    EXPECT_EQ(fingerprint(back), fingerprint(ds));
  }
}

TEST(Synthetic, SplitSizesAndLabels) {
  SynthSpec spec;
  spec.num_attributes = 3;
  spec.image_size = 8;
  const auto ds = generate_synthetic(spec, SplitCounts{5, 2, 4});
  EXPECT_EQ(ds.class_counts(Split::train), (std::vector<std::size_t>{5, 5, 5}));
  EXPECT_EQ(ds.class_counts(Split::val), (std::vector<std::size_t>{2, 2, 2}));
  EXPECT_EQ(ds.indices(Split::test).size(), 12u);
  for (const auto& it : ds.items) {
    for (double v : it.image.data()) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
    EXPECT_EQ(it.weak_label.has_value(), it.split != Split::test);
  }
  EXPECT_EQ(ds.attributes, (std::vector<std::string>{"stripes", "blobs", "checker"}));
}

TEST(Synthetic, MotifFrequenciesMatchQ) {
  SynthSpec spec;
  spec.num_attributes = 3;
  spec.image_size = 4;
  spec.cooccurrence = Tensor({3, 3}, {1.0, 0.3, 0.6, 0.1, 1.0, 0.5, 0.0, 0.9, 1.0});
  spec.seed = 77;
  const std::size_t n = 2000;
  const auto ds = generate_synthetic(spec, SplitCounts{1, 0, n});
  // test images are drawn class by class, n per class
  std::vector<std::vector<std::size_t>> present(3, std::vector<std::size_t>(3, 0));
  const auto test = ds.indices(Split::test);
  ASSERT_EQ(test.size(), 3 * n);
  for (std::size_t k = 0; k < test.size(); ++k)
    for (auto j : ds.items[test[k]].full_labels) ++present[k / n][j];
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) {
      const double q = spec.cooccurrence.at(i, j);
      const double sigma = std::sqrt(q * (1 - q) / n);
      EXPECT_NEAR(static_cast<double>(present[i][j]) / n, q, 3 * sigma + 1e-12) << i << "," << j;
    }
}

TEST(Synthetic, NoCooccurrenceGivesSingleLabels) {
  SynthSpec spec;
  spec.image_size = 6;
  spec.cooccurrence = Tensor::zeros({4, 4});
  for (std::size_t i = 0; i < 4; ++i) spec.cooccurrence.at(i, i) = 1.0;
  const auto ds = generate_synthetic(spec, SplitCounts{2, 1, 25});
  for (auto i : ds.indices(Split::test)) EXPECT_EQ(ds.items[i].full_labels.size(), 1u);
}

TEST(Synthetic, ForcedPairAlwaysCooccurs) {
  // motif 1 only appears in images drawn for class 1, and those always show 3
  SynthSpec spec;
  spec.image_size = 6;
  spec.cooccurrence = Tensor::fill({4, 4}, 0.3);
  for (std::size_t i = 0; i < 4; ++i) {
    spec.cooccurrence.at(i, i) = 1.0;
    if (i != 1) spec.cooccurrence.at(i, 1) = 0.0;
  }
  spec.cooccurrence.at(1, 3) = 1.0;
  const auto ds = generate_synthetic(spec, SplitCounts{2, 1, 40});
  const auto cm = cooccurrence(ds, Split::test);
  EXPECT_EQ(cm.values.at(1, 3), 1.0);
  EXPECT_LT(cm.values.at(3, 1), 1.0);
}

TEST(Synthetic, SameSeedSameBytes) {
  SynthSpec spec;
  spec.image_size = 10;
  spec.seed = 31;
  oracle::TempDir a("seed_a"), b("seed_b");
  write_dataset(generate_synthetic(spec, SplitCounts{3, 1, 2}), a.path());
  write_dataset(generate_synthetic(spec, SplitCounts{3, 1, 2}), b.path());
  const auto fa = files_under(a.path());
  ASSERT_EQ(fa, files_under(b.path()));
  for (const auto& f : fa) EXPECT_EQ(oracle::read_file(a / f), oracle::read_file(b / f)) << f;
  spec.seed = 32;
  EXPECT_NE(fingerprint(generate_synthetic(spec, SplitCounts{3, 1, 2})),
            fingerprint(load_dataset(a.path())));
}

TEST(Synthetic, OverlapDuplicatesUnderOtherClass) {
  SynthSpec spec;
  spec.image_size = 6;
  spec.overlap = 1.0;
  spec.cooccurrence = Tensor::fill({4, 4}, 1.0);
  const auto ds = generate_synthetic(spec, SplitCounts{3, 1, 1});
  // every train image shows all motifs, so each is also filed elsewhere
  EXPECT_EQ(ds.indices(Split::train).size(), 24u);
  spec.overlap = 0.0;
  EXPECT_EQ(generate_synthetic(spec, SplitCounts{3, 1, 1}).indices(Split::train).size(), 12u);
}

TEST(Synthetic, RejectsBadSpecs) {
  SynthSpec spec;
  spec.cooccurrence = Tensor::fill({4, 4}, 0.5);  // diagonal not 1
  EXPECT_THROW(generate_synthetic(spec, SplitCounts{}), std::invalid_argument);
  spec.cooccurrence = Tensor::fill({3, 3}, 1.0);
  EXPECT_THROW(generate_synthetic(spec, SplitCounts{}), std::invalid_argument);
  SynthSpec q;
  q.cooccurrence = Tensor::fill({4, 4}, 1.5);
  EXPECT_THROW(generate_synthetic(q, SplitCounts{}), std::invalid_argument);
}

TEST(Cooccurrence, Examples) {
  const auto lone = cooccurrence_from_sets({{1}}, 3);
  EXPECT_EQ(lone.values.at(1, 0), 0.0);
  EXPECT_EQ(lone.values.at(1, 1), 1.0);
  EXPECT_EQ(lone.values.at(1, 2), 0.0);
  EXPECT_TRUE(lone.defined[1]);
  EXPECT_FALSE(lone.defined[0]);
  EXPECT_EQ(lone.values.at(0, 0), 0.0);

  const auto half = cooccurrence_from_sets({{0, 2}, {0}}, 3);
  EXPECT_EQ(half.values.at(0, 2), 0.5);
  EXPECT_EQ(half.values.at(2, 0), 1.0);  // asymmetric
}

TEST(Cooccurrence, MatchesBruteForce) {
  Rng rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.uniform_int(6);
    const auto sets = oracle::random_label_sets(rng, 1 + rng.uniform_int(60), m);
    const auto ref = oracle::brute_cooccurrence(sets, m);
    const auto cm = cooccurrence_from_sets(sets, m);
    for (std::size_t i = 0; i < m; ++i) {
      EXPECT_EQ(cm.values.at(i, i), cm.defined[i] ? 1.0 : 0.0);
      for (std::size_t j = 0; j < m; ++j) {
        EXPECT_EQ(cm.values.at(i, j), ref[i][j]);
        EXPECT_GE(cm.values.at(i, j), 0.0);
        EXPECT_LE(cm.values.at(i, j), 1.0);
      }
    }
  }
}

TEST(Cooccurrence, CsvMarksUndefinedRows) {
  oracle::TempDir dir("cooc");
  write_cooccurrence_csv(dir / "c.csv", cooccurrence_from_sets({{0, 1}, {0}}, 3), {"x", "y", "z"});
  EXPECT_EQ(oracle::read_file(dir / "c.csv"),
            "attribute,x,y,z\nx,1.000000,0.500000,0.000000\ny,1.000000,1.000000,0.000000\nz,,,\n");
}

TEST(Batches, SizesOrderAndPartition) {
  const auto ds = oracle::small_synthetic(2, 5, 3, 4);  // 10 train items
  Rng r1(99), r2(99);
  BatchIterator a(ds, Split::train, 3, r1), b(ds, Split::train, 3, r2);
  EXPECT_EQ(a.num_batches(), 4u);
  std::vector<std::size_t> sizes, seen;
  while (auto batch = a.next()) {
    const auto other = b.next();
    ASSERT_TRUE(other.has_value());
    EXPECT_EQ(batch->indices, other->indices);
    EXPECT_EQ(batch->images.dim(0), batch->indices.size());
    sizes.push_back(batch->indices.size());
    seen.insert(seen.end(), batch->indices.begin(), batch->indices.end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{3, 3, 3, 1}));
  std::sort(seen.begin(), seen.end());
  EXPECT_EQ(seen, ds.indices(Split::train));

  Rng r3(100);
  BatchIterator c(ds, Split::train, 10, r3);
  EXPECT_NE(c.next()->indices, BatchIterator(ds, Split::train, 10, r1 = Rng(99)).next()->indices);
  EXPECT_THROW(BatchIterator(ds, Split::train, 0, r3), std::invalid_argument);
}

TEST(Batches, ImagesMatchItems) {
  const auto ds = oracle::small_synthetic(2, 3, 8, 4);
  Rng rng(1);
  BatchIterator it(ds, Split::train, 4, rng);
  const auto batch = it.next();
  for (std::size_t k = 0; k < batch->indices.size(); ++k) {
    const auto row = batch->images.slice(k);
    const auto src = ds.items[batch->indices[k]].image.data();
    EXPECT_TRUE(std::equal(row.begin(), row.end(), src.begin(), src.end()));
  }
}
