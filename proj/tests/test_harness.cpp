#include <catch_amalgamated.hpp>

#include <filesystem>
#include <random>

#include "test_support.hpp"
#include "trained_fixture.hpp"
#include "tima/harness.hpp"

using namespace tima;
using namespace tima::testing;

namespace {

template <class F>
void expect_code(ErrorCode code, F&& f) {
  try {
    f();
    FAIL("expected " << to_string(code));
  } catch (const Error& e) {
    CHECK(e.code() == code);
  }
}

std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "tima_harness_tests" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Short fine-tuning: one epoch over the first 256 training samples.
Dataset head(const Dataset& d, std::size_t n) {
  Dataset out = d;
  out.images = slice_rows(d.images, 0, n);
  out.labels.assign(d.labels.begin(), d.labels.begin() + static_cast<std::ptrdiff_t>(n));
  return out;
}

TrainConfig short_run(Variant v) {
  TrainConfig c;
  c.variant = v;
  c.epochs = 1;
  return c;
}

}  // namespace

TEST_CASE("TrainConfig defaults and validation", "[harness]") {
  TrainConfig c;
  CHECK(c.momentum == 0.9);
  CHECK(c.epochs == 10);
  CHECK(c.batch_size == 128);
  CHECK(c.train_attack.epsilon == 1.0 / 255.0);
  CHECK(c.train_attack.steps == 2);
  CHECK(c.train_attack.restarts == 0);
  TrainConfig p = TrainConfig::pretrain();
  CHECK(p.learning_rate == 1e-2);
  CHECK(p.epochs == 20);
  TrainConfig bad = c;
  bad.momentum = 1.0;
  expect_code(ErrorCode::InvalidConfig, [&] { bad.validate(); });
  bad = c;
  bad.learning_rate = 0.0;
  expect_code(ErrorCode::InvalidConfig, [&] { bad.validate(); });
  bad = c;
  bad.epochs = 0;
  expect_code(ErrorCode::InvalidConfig, [&] { bad.validate(); });
}

TEST_CASE("variant plans", "[harness]") {
  TrainConfig c;
  c.variant = Variant::tecoa;
  VariantPlan p = resolve_variant(c);
  CHECK((p.weights.m == 0.0 && p.weights.lambda == 0.0 && p.weights.lambda_v == 0.0));
  CHECK(p.freeze_text);
  CHECK(p.attack_text == TextSource::teacher);

  c.variant = Variant::iat_only;
  p = resolve_variant(c);
  CHECK((p.weights.m == 0.0 && p.weights.lambda_v == 0.0 && p.weights.lambda == 1.0 && p.weights.lambda_t == 1.0));
  CHECK_FALSE(p.freeze_text);

  c.variant = Variant::tai_only;
  p = resolve_variant(c);
  CHECK((p.weights.lambda == 0.0 && p.weights.lambda_v == 1.0 && p.weights.m == 0.1));
  CHECK(p.freeze_text);

  c.variant = Variant::mhe_only;
  p = resolve_variant(c);
  CHECK((p.weights.m == 0.0 && p.weights.lambda_t == 0.0 && p.weights.lambda_v == 0.0 && p.weights.lambda == 1.0));

  c.variant = Variant::tima;
  CHECK(resolve_variant(c).weights == c.loss_weights);

  for (Variant v : {Variant::tima, Variant::tecoa, Variant::iat_only, Variant::tai_only, Variant::mhe_only})
    CHECK(parse_variant(variant_name(v)) == v);
  expect_code(ErrorCode::InvalidVariant, [] { parse_variant("fgsm"); });
}

TEST_CASE("SgdMomentum hand steps", "[harness]") {
  Tensor w = Tensor::scalar(1.0);
  Tensor g = Tensor::scalar(1.0);
  SgdMomentum opt(0.1, 0.9);
  std::vector<Tensor*> params{&w};
  std::vector<const Tensor*> grads{&g};
  opt.step(params, grads);
  CHECK(w.item() == Catch::Approx(0.9).margin(1e-15));
  opt.step(params, grads);  // v = 1.9
  CHECK(w.item() == Catch::Approx(0.71).margin(1e-15));
}

TEST_CASE("pretrain_clean on the default recipe", "[harness]") {
  const auto& f = trained_fixture();
  const auto& loss = f.pretrain_trace.epoch_loss;
  REQUIRE(loss.size() == 20);
  CHECK(loss[1] <= loss[0]);
  CHECK(loss[2] <= loss[1]);
  CHECK(eval_clean(f.teacher_model, f.test) >= 0.9);

  SECTION("same seed gives bit-identical weights") {
    const Dataset small = head(f.train, 256);
    DualEncoder a = init_model(encoder_for(f.spec, 3));
    DualEncoder b = init_model(encoder_for(f.spec, 3));
    TrainConfig cfg = TrainConfig::pretrain();
    cfg.epochs = 2;
    pretrain_clean(a, small, cfg);
    pretrain_clean(b, small, cfg);
    CHECK(a == b);
  }
}

TEST_CASE("finetune variants", "[harness]") {
  const auto& f = trained_fixture();
  const TeacherSnapshot teacher(f.teacher_model);
  const auto fingerprint = teacher.fingerprint();
  const Dataset small = head(f.train, 256);

  SECTION("tecoa keeps the text bit-unchanged") {
    DualEncoder s = f.teacher_model;
    finetune(s, teacher, small, short_run(Variant::tecoa));
    CHECK(s.class_table == f.teacher_model.class_table);
    CHECK(s.text_projection == f.teacher_model.text_projection);
    CHECK_FALSE(s.weights == f.teacher_model.weights);
    CHECK(teacher.fingerprint() == fingerprint);
  }
  SECTION("tima moves both encoders after one batch") {
    DualEncoder s = f.teacher_model;
    TrainConfig c = short_run(Variant::tima);
    finetune(s, teacher, head(f.train, 128), c);
    CHECK_FALSE(s.weights == f.teacher_model.weights);
    CHECK_FALSE(s.class_table == f.teacher_model.class_table);
    CHECK(teacher.fingerprint() == fingerprint);
  }
  SECTION("every variant leaves the teacher untouched") {
    for (Variant v : {Variant::iat_only, Variant::tai_only, Variant::mhe_only}) {
      DualEncoder s = f.teacher_model;
      finetune(s, teacher, head(f.train, 128), short_run(v));
      CHECK(teacher.fingerprint() == fingerprint);
      CHECK(teacher.model() == f.teacher_model);
    }
  }
  SECTION("tecoa batch losses equal the reduced objective") {
    DualEncoder s = f.teacher_model;
    LossWeights reduced;
    reduced.m = 0.0;
    reduced.lambda = 0.0;
    reduced.lambda_v = 0.0;
    std::size_t seen = 0;
    double worst = 0.0;
    finetune(s, teacher, small, short_run(Variant::tecoa), [&](const BatchRecord& r) {
      Tape tape;
      BoundEncoder b(tape, r.model);
      const double direct = tima_loss(b, teacher, r.x_clean, r.x_adv, r.labels, reduced).total.value().item();
      Tape t2;
      BoundEncoder b2(t2, r.model);
      const double plain =
          contrastive_ce(cosine_sim_matrix(b2.images(r.x_adv), t2.constant(teacher.class_text())), r.labels, reduced.tau)
              .value()
              .item();
      worst = std::max({worst, std::abs(direct - r.terms.total), std::abs(plain - r.terms.total)});
      ++seen;
    });
    CHECK(seen == 2);
    CHECK(worst <= 1e-12);
  }
  SECTION("observer sees adversarial batches inside the training ball") {
    DualEncoder s = f.teacher_model;
    double worst = 0.0;
    finetune(s, teacher, small, short_run(Variant::tima), [&](const BatchRecord& r) {
      for (std::size_t i = 0; i < r.x_clean.size(); ++i) worst = std::max(worst, std::abs(r.x_adv[i] - r.x_clean[i]));
    });
    CHECK(worst <= 1.0 / 255.0 + 1e-9);
    CHECK(worst > 0.0);
  }
  SECTION("fine-tuning is deterministic") {
    DualEncoder a = f.teacher_model, b = f.teacher_model;
    auto ta = finetune(a, teacher, small, short_run(Variant::tima));
    auto tb = finetune(b, teacher, small, short_run(Variant::tima));
    CHECK(a == b);
    CHECK(ta.epoch_loss == tb.epoch_loss);
  }
  SECTION("empty training set") {
    DualEncoder s = f.teacher_model;
    Dataset empty;
    expect_code(ErrorCode::EmptyDataset, [&] { finetune(s, teacher, empty, short_run(Variant::tima)); });
  }
}

TEST_CASE("eval_clean", "[harness]") {
  SECTION("a model that sends every image to class 0's direction") {
    EncoderConfig c;
    c.input_dim = 4;
    c.hidden_dims = {};
    c.embed_dim = 3;
    c.num_classes = 3;
    DualEncoder m = init_model(c);
    m.weights[0] = Tensor::zeros(4, 3);
    m.biases[0] = Tensor::matrix({{0.0, 2.0, 0.0}});
    m.text_projection = Tensor::matrix({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}});
    m.class_table = Tensor::matrix({{0, 1, 0}, {1, 0, 0}, {0, 0.5, 0.5}});
    Dataset d;
    d.images = Tensor(Shape{5, 4}, 0.3);
    d.labels = {0, 0, 0, 0, 0};
    d.superclass_of = {0, 0, 0};
    d.num_superclasses = 1;
    d.image_side = 2;
    CHECK(eval_clean(m, d) == 1.0);
  }
  SECTION("equals robust accuracy at eps = 0") {
    const auto& f = trained_fixture();
    const TeacherSnapshot teacher(f.teacher_model);
    CHECK(eval_clean(f.teacher_model, f.test) == robust_accuracy(f.teacher_model, teacher, f.test, AttackConfig::pgd10(0.0)));
  }
  SECTION("random models are at chance on average") {
    const auto& f = trained_fixture();
    double total = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) total += eval_clean(init_model(encoder_for(f.spec, seed)), f.test);
    CHECK(total / 20.0 >= 0.05);
    CHECK(total / 20.0 <= 0.25);
  }
}

TEST_CASE("interclass_stats", "[harness]") {
  auto s = interclass_stats(Tensor::matrix({{1, 0}, {-1, 0}}));
  CHECK(s.min == 2.0);
  CHECK(s.mean == 2.0);
  CHECK(interclass_stats(Tensor::matrix({{1, 0}, {1, 0}})).min == 0.0);
  const double h = std::sqrt(3.0) / 2.0;
  s = interclass_stats(Tensor::matrix({{1, 0}, {-0.5, h}, {-0.5, -h}}));
  CHECK(s.min == Catch::Approx(1.7320508075688772).margin(1e-12));
  CHECK(s.mean == Catch::Approx(1.7320508075688772).margin(1e-12));
  expect_code(ErrorCode::TooFewClasses, [] { interclass_stats(Tensor::matrix({{1, 0}})); });
}

TEST_CASE("superclass_block_gap", "[harness]") {
  // Two superclasses of two classes each: siblings at 60 degrees, the
  // blocks orthogonal.
  const double c = 0.5, s = std::sqrt(3.0) / 2.0;
  const Tensor t = Tensor::matrix({{1, 0, 0, 0}, {c, s, 0, 0}, {0, 0, 1, 0}, {0, 0, c, s}});
  std::vector<std::size_t> super{0, 0, 1, 1};
  CHECK(superclass_block_gap(t, super) == Catch::Approx(0.5).margin(1e-12));
  // Regular simplex: every pair has the same similarity, so the gap is 0.
  const Tensor simplex = normalized_rows(Tensor::matrix({{3, -1, -1, -1}, {-1, 3, -1, -1}, {-1, -1, 3, -1}, {-1, -1, -1, 3}}));
  CHECK(std::abs(superclass_block_gap(simplex, super)) <= 1e-12);
}

TEST_CASE("similarity matrices", "[harness]") {
  const auto& f = trained_fixture();
  const TeacherSnapshot teacher(f.teacher_model);
  const Dataset sample = head(f.test, 120);
  const std::vector<double> eps{1.0 / 255.0, 4.0 / 255.0};
  const auto dir = temp_dir("matrices");
  DualEncoder student = f.teacher_model;
  finetune(student, teacher, head(f.train, 128), short_run(Variant::tima));
  auto manifest = export_similarity_matrices(student, teacher, sample, eps, dir);
  REQUIRE(manifest.size() == 8);

  const auto matrices = similarity_matrices("student", student, sample, eps, AttackConfig::pgd10(0.0));
  for (const auto& m : matrices) {
    INFO(m.name);
    CHECK(m.values.shape() == Shape{8, 8});
    const bool symmetric_kind = m.name.find("image_text") == std::string::npos;
    if (symmetric_kind) {
      CHECK(first_mismatch(m.values, transpose(m.values), 0.0, 1e-12) == -1);
    }
    if (m.name.find("text_text") != std::string::npos) {
      for (std::size_t k = 0; k < 8; ++k) CHECK(std::abs(m.values(k, k) - 1.0) <= 1e-9);
    }
  }

  SECTION("files are CSV plus P5 heatmaps") {
    for (const auto& m : manifest) {
      CHECK(std::filesystem::exists(dir / m.csv));
      const auto pgm = io::read_file(dir / m.pgm);
      CHECK(std::string(pgm.begin(), pgm.begin() + 2) == "P5");
      CHECK(pgm.size() == std::string("P5\n8 8\n255\n").size() + 64);
    }
  }
  SECTION("teacher matrices ignore fine-tuning") {
    DualEncoder other = f.teacher_model;
    finetune(other, teacher, head(f.train, 128), short_run(Variant::tecoa));
    const auto dir2 = temp_dir("matrices_other");
    export_similarity_matrices(other, teacher, sample, eps, dir2);
    for (const auto& m : manifest) {
      if (m.name.rfind("teacher", 0) != 0) continue;
      CHECK(io::read_file(dir / m.csv) == io::read_file(dir2 / m.csv));
      CHECK(io::read_file(dir / m.pgm) == io::read_file(dir2 / m.pgm));
    }
  }
  SECTION("pgm mapping") {
    const auto bytes = matrix_pgm(Tensor::matrix({{-1, 0, 1}}));
    const std::size_t h = bytes.size() - 3;
    CHECK(bytes[h] == 0);
    CHECK(bytes[h + 1] == 128);
    CHECK(bytes[h + 2] == 255);
  }
}

TEST_CASE("reports", "[harness]") {
  EvalReport r;
  r.config = {{"seed", 3}, {"variant", "tima"}};
  r.seed = 3;
  r.clean_accuracy = 0.987;
  r.robust_accuracy = {{"0/255", 0.987}, {"4/255", 0.1 + 0.2}};
  r.probe_clean_accuracy = 0.5;
  r.text_min_distance = 1.0 / 3.0;
  r.text_mean_distance = 1.25;
  r.teacher_text_min_distance = 0.4;
  r.teacher_text_mean_distance = 1.3;
  r.superclass_confusion = {{0, 1.0, 0.0}, {1, 0.75, 0.5}};
  r.matrices = {{"student_text_text", "student_text_text.csv", "student_text_text.pgm"}};

  SECTION("round trip keeps every number exactly") {
    const EvalReport back = parse_report(report_text(r));
    CHECK(back.clean_accuracy == r.clean_accuracy);
    CHECK(back.robust_accuracy == r.robust_accuracy);
    CHECK(back.text_min_distance == r.text_min_distance);
    CHECK(back.teacher_text_mean_distance == r.teacher_text_mean_distance);
    CHECK(back.superclass_confusion.size() == 2);
    CHECK(back.superclass_confusion[1].within_superclass_error_share == 0.5);
    CHECK(back.matrices == r.matrices);
    CHECK(back.config == r.config);
    CHECK(report_text(back) == report_text(r));
  }
  SECTION("files are byte-identical across writes") {
    const auto dir = temp_dir("reports");
    write_report(r, dir / "a.json");
    write_report(r, dir / "b.json");
    CHECK(io::read_file(dir / "a.json") == io::read_file(dir / "b.json"));
    CHECK(read_report(dir / "a.json").seed == 3);
  }
  SECTION("missing key is a schema error") {
    auto j = report_to_json(r);
    j.erase("clean_accuracy");
    expect_code(ErrorCode::Schema, [&] { report_from_json(j); });
    expect_code(ErrorCode::Schema, [] { parse_report("{not json"); });
  }
}

TEST_CASE("evaluate fills the report", "[harness]") {
  const auto& f = trained_fixture();
  const TeacherSnapshot teacher(f.teacher_model);
  const Dataset sample = head(f.test, 100);
  const std::vector<double> eps{0.0, 1.0 / 255.0, 4.0 / 255.0, 8.0 / 255.0};
  EvalReport r = evaluate(f.teacher_model, teacher, sample, nullptr, eps, AttackConfig::pgd10(0.0));
  REQUIRE(r.robust_accuracy.size() == 4);
  CHECK(r.robust_accuracy[0].first == "0/255");
  CHECK(r.robust_accuracy[3].first == "8/255");
  CHECK(r.robust_accuracy[0].second == r.clean_accuracy);
  CHECK(r.text_min_distance == r.teacher_text_min_distance);
  CHECK(r.text_min_distance >= 0.0);
  CHECK(r.text_mean_distance <= 2.0);
  CHECK(r.superclass_confusion.size() == 4);
}
