#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <sstream>

#include "flowmix/classifier.hpp"
#include "helpers.hpp"

using namespace flowmix;
using testutil::TempDir;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Two well-separated 2-D Gaussian classes.
Dataset two_class_data(std::size_t n, std::uint64_t seed) {
  return synth_multimodal(
      {{{-5.0, 0.0}, 0.5, 0.5}, {{5.0, 0.0}, 0.5, 0.5}}, n, seed);
}

Dataset three_class_data(std::size_t n, std::uint64_t seed) {
  return synth_multimodal({{{-6.0, 0.0}, 0.5, 1.0 / 3.0},
                           {{6.0, 0.0}, 0.5, 1.0 / 3.0},
                           {{0.0, 6.0}, 0.5, 1.0 / 3.0}},
                          n, seed);
}

ClassifierConfig fast_latmm_config(std::size_t k = 1) {
  ClassifierConfig cfg;
  cfg.kind = ModelKind::latmm;
  cfg.k = k;
  cfg.flow.depth = 0; // identity flow: latent mixture does all the work
  cfg.em.epochs = 30;
  cfg.em.batch_size = 32;
  cfg.em.learning_rate = 0.05;
  cfg.em.seed = 11;
  return cfg;
}

ClassifierConfig fast_genmm_config() {
  ClassifierConfig cfg;
  cfg.kind = ModelKind::genmm;
  cfg.k = 1;
  cfg.flow.depth = 1;
  cfg.flow.hidden = 8;
  cfg.em.epochs = 5;
  cfg.em.batch_size = 32;
  cfg.em.learning_rate = 0.02;
  cfg.em.seed = 11;
  return cfg;
}

/// Bundle of `y` classes sharing one identical untrained model.
ClassifierBundle identical_model_bundle(std::size_t y) {
  ClassifierBundle b;
  b.cfg.kind = ModelKind::genmm;
  b.dim = 2;
  for (std::size_t c = 0; c < y; ++c) {
    b.class_ids.push_back("c" + std::to_string(c));
    b.class_counts.push_back(10);
    FlowBuildOptions opt;
    opt.depth = 1;
    opt.hidden = 8;
    b.gen_models.push_back(GenMMModel::create(1, 2, opt, 99));
  }
  return b;
}

} // namespace

TEST_CASE("class seeds derive from the id and add the base") {
  std::uint64_t a0 = class_seed(0, "A");
  std::uint64_t b0 = class_seed(0, "B");
  CHECK(a0 != b0);
  CHECK(class_seed(1000, "A") == a0 + 1000);
  CHECK(class_seed(0, "A") == a0); // stable across calls
  CHECK(class_seed(0, "AB") != class_seed(0, "BA"));
}

TEST_CASE("config validation rejects bad shapes") {
  ClassifierConfig cfg;
  cfg.k = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.k = 1;
  cfg.kind = ModelKind::flow;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.kind = ModelKind::genmm;
  cfg.em.learning_rate = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("fit requires labels and non-empty classes") {
  ClassifierConfig cfg = fast_genmm_config();
  Dataset unlabeled;
  unlabeled.samples = Matrix(4, 2);
  CHECK_THROWS_AS(ClassifierBundle::fit(unlabeled, cfg), ConsistencyError);

  Dataset named_but_empty = two_class_data(20, 1);
  named_but_empty.label_names.push_back("ghost");
  CHECK_THROWS_AS(ClassifierBundle::fit(named_but_empty, cfg),
                  InsufficientSamples);
}

TEST_CASE("a single-class bundle always predicts that class") {
  Dataset d = synth_multimodal({{{0.0, 0.0}, 1.0, 1.0}}, 40, 2);
  ClassifierConfig cfg = fast_genmm_config();
  cfg.em.epochs = 1;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);
  REQUIRE(b.num_classes() == 1);
  CHECK(b.class_ids[0] == "mode0");
  auto pred = b.predict_indices(d.samples);
  for (std::size_t p : pred) CHECK(p == 0);
  auto [id, ll] = b.predict({0.3, -0.2});
  CHECK(id == "mode0");
  CHECK(ll.size() == 1);
  CHECK(std::isfinite(ll[0]));
}

TEST_CASE("far-apart gaussian classes reach >0.99 train accuracy") {
  Dataset d = two_class_data(200, 5);
  ClassifierBundle b = ClassifierBundle::fit(d, fast_latmm_config());
  AccuracyReport r = b.evaluate_accuracy(d);
  CHECK(r.accuracy > 0.99);
  CHECK(r.n == 200);
  CHECK(r.n_unseen == 0);
}

TEST_CASE("a sample at a class's training mean goes to that class") {
  Dataset d = two_class_data(200, 6);
  ClassifierBundle b = ClassifierBundle::fit(d, fast_latmm_config());
  CHECK(b.predict({-5.0, 0.0}).first == "mode0");
  CHECK(b.predict({5.0, 0.0}).first == "mode1");
}

TEST_CASE("identical class models tie to the lower index") {
  ClassifierBundle b = identical_model_bundle(2);
  Matrix x(3, 2, {0.1, 0.2, -1.0, 0.5, 2.0, -2.0});
  Matrix ll = b.class_log_likelihood(x);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(ll.at(i, 0) == doctest::Approx(ll.at(i, 1)).epsilon(1e-12));
  auto pred = b.predict_indices(x);
  for (std::size_t p : pred) CHECK(p == 0);
}

TEST_CASE("constant predictor on balanced classes scores about 1/Y") {
  ClassifierBundle b = identical_model_bundle(3);
  Dataset test = synth_multimodal({{{0.0, 0.0}, 1.0, 1.0 / 3.0},
                                   {{0.1, 0.0}, 1.0, 1.0 / 3.0},
                                   {{0.0, 0.1}, 1.0, 1.0 / 3.0}},
                                  300, 9);
  // rename the synthetic labels onto the bundle's class ids
  test.label_names = {"c0", "c1", "c2"};
  AccuracyReport r = b.evaluate_accuracy(test);
  double frac0 = 0.0;
  for (int l : *test.labels)
    if (l == 0) frac0 += 1.0;
  frac0 /= double(test.size());
  CHECK(r.accuracy == doctest::Approx(frac0).epsilon(1e-12));
  CHECK(std::fabs(r.accuracy - 1.0 / 3.0) < 0.1);
}

TEST_CASE("a uniform additive shift never changes predictions") {
  // balanced counts make the optional class prior a constant shift
  Dataset d = two_class_data(200, 7);
  ClassifierConfig cfg = fast_latmm_config();
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);
  REQUIRE(b.class_counts[0] != b.class_counts[1]); // draw imbalance is fine
  b.class_counts = {100, 100};
  auto base = b.predict_indices(d.samples);
  b.cfg.use_class_prior = true;
  auto shifted = b.predict_indices(d.samples);
  CHECK(base == shifted);
}

TEST_CASE("unseen test labels count as errors and are reported") {
  Dataset d = two_class_data(120, 8);
  ClassifierBundle b = ClassifierBundle::fit(d, fast_latmm_config());

  Dataset test = two_class_data(40, 18);
  test.label_names.push_back("mystery");
  // relabel 5 rows to the unseen class
  for (std::size_t i = 0; i < 5; ++i) (*test.labels)[i] = 2;
  AccuracyReport r = b.evaluate_accuracy(test);
  CHECK(r.n == 40);
  CHECK(r.n_unseen == 5);
  CHECK(r.accuracy <= double(40 - 5) / 40.0);
}

TEST_CASE("add_class rejects duplicates and empty data") {
  Dataset d = two_class_data(60, 10);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 2;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);
  CHECK_THROWS_AS(b.add_class("mode0", Matrix(4, 2)), ConflictError);
  CHECK_THROWS_AS(b.add_class("fresh", Matrix(0, 2)), EmptyDataset);
  CHECK_THROWS_AS(b.add_class("fresh", Matrix(4, 3)), ShapeError);
}

TEST_CASE("add_class to an empty bundle equals fit on one class") {
  Dataset d = synth_multimodal({{{1.0, -1.0}, 0.7, 1.0}}, 50, 12);
  ClassifierConfig cfg = fast_genmm_config();
  cfg.em.epochs = 3;

  ClassifierBundle fitted = ClassifierBundle::fit(d, cfg);

  ClassifierBundle grown;
  grown.cfg = cfg;
  grown.add_class("mode0", d.samples);

  TempDir dir("flowmix_clf_single");
  save_classifier(dir.path() + "/fit", fitted);
  save_classifier(dir.path() + "/grown", grown);
  CHECK(slurp(dir.path() + "/fit/class_0.nnmm") ==
        slurp(dir.path() + "/grown/class_0.nnmm"));
  CHECK(slurp(dir.path() + "/fit/classifier.manifest") ==
        slurp(dir.path() + "/grown/classifier.manifest"));
}

TEST_CASE("sequential add_class reproduces the joint fit exactly") {
  Dataset d = three_class_data(180, 13);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 8;

  ClassifierBundle joint = ClassifierBundle::fit(d, cfg);

  // fit on the first two classes only, then add the third
  std::vector<std::size_t> keep;
  std::vector<std::size_t> third;
  for (std::size_t i = 0; i < d.size(); ++i)
    ((*d.labels)[i] == 2 ? third : keep).push_back(i);
  Dataset first_two = subset(d, keep);
  first_two.label_names = {"mode0", "mode1"};
  ClassifierBundle staged = ClassifierBundle::fit(first_two, cfg);
  staged.add_class("mode2", gather_rows(d.samples, third));

  TempDir dir("flowmix_clf_joint");
  save_classifier(dir.path() + "/joint", joint);
  save_classifier(dir.path() + "/staged", staged);
  for (const char* f :
       {"classifier.manifest", "class_0.nnmm", "class_1.nnmm", "class_2.nnmm"})
    CHECK(slurp(dir.path() + "/joint/" + std::string(f)) ==
          slurp(dir.path() + "/staged/" + std::string(f)));

  AccuracyReport ja = joint.evaluate_accuracy(d);
  AccuracyReport sa = staged.evaluate_accuracy(d);
  CHECK(ja.accuracy == sa.accuracy);
}

TEST_CASE("add_class leaves existing model files byte-identical") {
  Dataset d = two_class_data(80, 14);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 3;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);

  TempDir dir("flowmix_clf_iso");
  save_classifier(dir.path() + "/bundle", b);
  std::string before0 = slurp(dir.path() + "/bundle/class_0.nnmm");
  std::string before1 = slurp(dir.path() + "/bundle/class_1.nnmm");

  Rng extra(55);
  Matrix fresh(30, 2);
  for (auto& v : fresh.data) v = 20.0 + extra.gaussian();
  b.add_class("fresh", fresh);
  save_classifier(dir.path() + "/bundle", b);

  CHECK(slurp(dir.path() + "/bundle/class_0.nnmm") == before0);
  CHECK(slurp(dir.path() + "/bundle/class_1.nnmm") == before1);
  CHECK(b.predict({20.0, 20.0}).first == "fresh");
}

TEST_CASE("an undersized class trains with a reduced batch") {
  Dataset d = two_class_data(80, 15);
  // shrink class 1 to 3 rows
  std::vector<std::size_t> keep;
  std::size_t kept1 = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if ((*d.labels)[i] == 1 && kept1 >= 3) continue;
    kept1 += (*d.labels)[i] == 1;
    keep.push_back(i);
  }
  Dataset small = subset(d, keep);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 2;
  cfg.em.batch_size = 64;
  ClassifierBundle b = ClassifierBundle::fit(small, cfg); // warns on stderr
  CHECK(b.class_counts[1] == 3);
  CHECK(std::isfinite(b.class_log_likelihood(small.samples).at(0, 1)));
}

TEST_CASE("per-class training is thread-count invariant") {
  Dataset d = three_class_data(120, 16);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 4;

  cfg.threads = 1;
  ClassifierBundle serial = ClassifierBundle::fit(d, cfg);
  cfg.threads = 3;
  ClassifierBundle parallel = ClassifierBundle::fit(d, cfg);

  TempDir dir("flowmix_clf_threads");
  save_classifier(dir.path() + "/serial", serial);
  save_classifier(dir.path() + "/parallel", parallel);
  for (const char* f : {"class_0.nnmm", "class_1.nnmm", "class_2.nnmm"})
    CHECK(slurp(dir.path() + "/serial/" + std::string(f)) ==
          slurp(dir.path() + "/parallel/" + std::string(f)));
}

TEST_CASE("fit_with_curve matches fit and records per-epoch accuracy") {
  Dataset d = two_class_data(120, 17);
  auto [train, test] = train_test_split(d, 0.25, 3);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 20;

  ClassifierBundle plain = ClassifierBundle::fit(train, cfg);
  std::vector<AccuracyReport> curve;
  ClassifierBundle curved =
      ClassifierBundle::fit_with_curve(train, cfg, test, curve);

  REQUIRE(curve.size() == 20);
  for (const auto& r : curve) {
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
    CHECK(r.n == test.size());
  }
  CHECK(curve.back().accuracy > 0.99);
  CHECK(curve.back().accuracy >= curve.front().accuracy);

  TempDir dir("flowmix_clf_curve");
  save_classifier(dir.path() + "/plain", plain);
  save_classifier(dir.path() + "/curved", curved);
  for (const char* f : {"class_0.nnmm", "class_1.nnmm"})
    CHECK(slurp(dir.path() + "/plain/" + std::string(f)) ==
          slurp(dir.path() + "/curved/" + std::string(f)));
}

TEST_CASE("bundles round trip through their directory form") {
  Dataset d = two_class_data(100, 19);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 5;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);

  TempDir dir("flowmix_clf_rt");
  save_classifier(dir.path() + "/bundle", b);
  ClassifierBundle back = load_classifier(dir.path() + "/bundle");

  CHECK(back.class_ids == b.class_ids);
  CHECK(back.class_counts == b.class_counts);
  CHECK(back.dim == b.dim);
  CHECK(back.cfg.kind == b.cfg.kind);
  CHECK(back.cfg.em.seed == b.cfg.em.seed);

  auto p1 = b.predict_indices(d.samples);
  auto p2 = back.predict_indices(d.samples);
  CHECK(p1 == p2);
  Matrix l1 = b.class_log_likelihood(d.samples);
  Matrix l2 = back.class_log_likelihood(d.samples);
  for (std::size_t i = 0; i < l1.data.size(); ++i)
    CHECK(l1.data[i] == l2.data[i]);

  // save -> load -> save byte identity, directory-wide
  save_classifier(dir.path() + "/again", back);
  for (const char* f : {"classifier.manifest", "class_0.nnmm", "class_1.nnmm"})
    CHECK(slurp(dir.path() + "/bundle/" + std::string(f)) ==
          slurp(dir.path() + "/again/" + std::string(f)));
}

TEST_CASE("class ids containing spaces survive persistence") {
  Dataset d = two_class_data(60, 20);
  d.label_names = {"left cloud", "right cloud"};
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 2;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);

  TempDir dir("flowmix_clf_spaces");
  save_classifier(dir.path() + "/bundle", b);
  ClassifierBundle back = load_classifier(dir.path() + "/bundle");
  CHECK(back.class_ids == std::vector<std::string>{"left cloud",
                                                   "right cloud"});
}

TEST_CASE("bundle loading failure modes") {
  TempDir dir("flowmix_clf_bad");
  CHECK_THROWS_AS(load_classifier(dir.path() + "/nodir"), IoError);

  std::filesystem::create_directories(dir.path() + "/bad");
  std::ofstream(dir.path() + "/bad/classifier.manifest")
      << "flowmix-classifier 9\n";
  CHECK_THROWS_WITH_AS(load_classifier(dir.path() + "/bad"),
                       doctest::Contains("version"), PersistenceError);

  std::ofstream(dir.path() + "/bad/classifier.manifest")
      << "flowmix-classifier 1\nkind pancake\n";
  CHECK_THROWS_AS(load_classifier(dir.path() + "/bad"), PersistenceError);
}

TEST_CASE("a sample no class can score raises Unscorable") {
  Dataset d = two_class_data(60, 21);
  ClassifierConfig cfg = fast_latmm_config();
  cfg.em.epochs = 2;
  ClassifierBundle b = ClassifierBundle::fit(d, cfg);
  Matrix x(1, 2, {1e200, 1e200});
  CHECK_THROWS_WITH_AS(b.predict_indices(x), doctest::Contains("sample 0"),
                       Unscorable);
}
