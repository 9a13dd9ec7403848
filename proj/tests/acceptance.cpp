// Runs every acceptance criterion and prints one PASS/FAIL line each.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "loss_fixture.hpp"
#include "simplex.hpp"
#include "test_support.hpp"
#include "tima/cli.hpp"

using namespace tima;
using namespace tima::testing;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

int failures = 0;

void report(int id, const char* title, const std::function<void(Outcome&)>& body) {
  Outcome o;
  const auto t0 = Clock::now();
  try {
    body(o);
  } catch (const std::exception& e) {
    o.pass = false;
    o.detail << " [exception: " << e.what() << "]";
  }
  if (!o.pass) ++failures;
  std::printf("%s %d %s:%s (%.1fs)\n", o.pass ? "PASS" : "FAIL", id, title, o.detail.str().c_str(), seconds_since(t0));
  std::fflush(stdout);
}

double mhe_of(const Tensor& t) {
  Tape tape;
  return mhe_loss(tape.leaf(t)).value().item();
}

double kl_of(const Tensor& p, const Tensor& q, double tau) {
  Tape tape;
  return kl_rows(tape.constant(p), tape.leaf(q), tau).value().item();
}

// 1 ---------------------------------------------------------------------------

void gradient_oracle_criterion(Outcome& o) {
  const auto t0 = Clock::now();
  std::size_t checked = 0, mismatches = 0;
  double worst = 0.0;
  std::map<std::string, std::size_t> per_op;
  for (std::uint64_t seed = 0; seed < 20; ++seed)
    for (const auto& r : gradient_oracle(seed)) {
      checked += r.checked;
      mismatches += r.mismatches;
      worst = std::max(worst, r.worst_abs);
      per_op[r.op] += r.checked;
      o.require(r.checked > 0, r.op + " checked nothing on seed " + std::to_string(seed));
      o.require(r.mismatches == 0, r.op + " mismatched on seed " + std::to_string(seed));
    }
  const double elapsed = seconds_since(t0);
  for (const char* op : {"mhe_loss", "iakd_loss", "tam_loss", "takd_loss", "tima_loss", "encode_images"})
    o.require(per_op.count(op) == 1, std::string(op) + " missing");
  o.require(elapsed < 60.0, "runtime >= 60 s");
  o.detail << " 20 seeds, " << per_op.size() << " ops, " << checked << " partials, " << mismatches
           << " mismatches, worst abs error " << worst;
}

// 2 ---------------------------------------------------------------------------

void analytic_values_criterion(Outcome& o) {
  const double h = std::sqrt(3.0) / 2.0;
  const double antipodal = mhe_of(Tensor::matrix({{1, 0}, {-1, 0}}));
  const double coincident = mhe_of(Tensor::matrix({{1, 0}, {1, 0}}));
  const double triple = mhe_of(Tensor::matrix({{1, 0}, {-0.5, h}, {-0.5, -h}}));
  o.require(std::abs(antipodal - 0.2) <= 1e-15, "mhe antipodal");
  o.require(coincident == 1.0, "mhe coincident");
  o.require(std::abs(triple - 0.25) <= 1e-15, "mhe triple");

  Tape tape;
  const double tam = tam_loss(tape.leaf(Tensor::matrix({{1, 0}})), Tensor::zeros(1, 2), std::vector<std::size_t>{0}, 1.0)
                         .value()
                         .item();
  o.require(std::abs(tam - 0.3133) <= 1e-4, "tam 2-class");

  const Tensor p = Tensor::matrix({{0.3, -0.2, 1.0}});
  const double kl_zero = kl_of(p, p, 0.5);
  const double kl_ln2 = kl_of(Tensor::matrix({{50, 0}}), Tensor::matrix({{0, 0}}), 1.0);
  o.require(kl_zero == 0.0, "kl identical");
  o.require(std::abs(kl_ln2 - std::log(2.0)) <= 1e-6, "kl ln 2");

  const Tensor s_it = Tensor::matrix({{0.8, 0.78, 0.5}});
  const Tensor s_tt = Tensor::matrix({{1.0, 0.9, 0.2}, {0.9, 1.0, 0.1}, {0.2, 0.1, 1.0}});
  const Tensor m = adaptive_margin(s_it, s_tt, std::vector<std::size_t>{0}, 0.1, 0.95);
  o.require(m(0, 1) == 0.1 * 0.9 && m(0, 2) == 0.0 && m(0, 0) == 0.1, "adaptive margin");

  o.detail << " mhe " << antipodal << " / " << coincident << " / " << triple << "; tam " << tam << "; kl " << kl_zero
           << " / " << kl_ln2 << "; margin " << m(0, 1) << " / " << m(0, 2) << " / " << m(0, 0);
}

// 3 ---------------------------------------------------------------------------

void simplex_criterion(Outcome& o) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  for (auto [n, d] : {std::pair<std::size_t, std::size_t>{3, 2}, {4, 3}})
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const SimplexRun r = mhe_descent(n, d, seed);
      worst = std::max(worst, r.worst_offset);
      o.require(r.worst_offset <= 1e-2, "N=" + std::to_string(n) + " seed " + std::to_string(seed));
    }
  const double elapsed = seconds_since(t0);
  o.require(elapsed < 30.0, "runtime >= 30 s");
  o.detail << " (3,2) and (4,3) from 10 starts each, worst |<ti,tj> + 1/(N-1)| = " << worst;
}

// 4 ---------------------------------------------------------------------------

void tecoa_reduction_criterion(Outcome& o) {
  LossWeights w;
  w.m = 0.0;
  w.lambda = 0.0;
  w.lambda_v = 0.0;
  double worst = 0.0;
  for (std::uint64_t rep = 0; rep < 100; ++rep) {
    Fixture f = make_fixture(5000 + rep);
    Tape tape;
    BoundEncoder b(tape, f.student);
    const double total = tima_loss(b, f.teacher, f.x, f.x_adv, f.labels, w).total.value().item();
    Tape t2;
    BoundEncoder b2(t2, f.student);
    const double plain =
        contrastive_ce(cosine_sim_matrix(b2.images(f.x_adv), t2.constant(f.teacher.class_text())), f.labels, w.tau)
            .value()
            .item();
    worst = std::max(worst, std::abs(total - plain));
  }
  o.require(worst <= 1e-12, "difference above 1e-12");
  o.detail << " 100 batches, worst |tima - ce| = " << worst;
}

// 5 ---------------------------------------------------------------------------

struct Ball {
  double max_delta = 0.0;
  bool in_range = true;
};

Ball measure(const Tensor& x, const Tensor& adv) {
  Ball b;
  for (std::size_t i = 0; i < x.size(); ++i) {
    b.max_delta = std::max(b.max_delta, std::abs(adv[i] - x[i]));
    b.in_range = b.in_range && adv[i] >= 0.0 && adv[i] <= 1.0;
  }
  return b;
}

void pgd_contracts_criterion(Outcome& o) {
  std::size_t runs = 0;
  auto check = [&](const DualEncoder& m, const Tensor& x, std::span<const std::size_t> y, const AttackConfig& cfg,
                   const std::string& label) {
    const Tensor text = encode_classes(m);
    const Tensor adv = pgd_attack(m, text, x, y, cfg);
    const Ball b = measure(x, adv);
    o.require(b.max_delta <= cfg.epsilon + 1e-9, label + " left the ball");
    o.require(b.in_range, label + " left [0,1]");
    o.require(pgd_attack(m, text, x, y, cfg) == adv, label + " not deterministic");
    if (cfg.epsilon == 0.0) o.require(adv == x, label + " eps=0 not identity");
    ++runs;
  };

  for (std::uint64_t seed = 0; seed < 24; ++seed) {
    std::mt19937_64 rng(seed);
    EncoderConfig ec;
    ec.input_dim = 16;
    ec.hidden_dims = {8};
    ec.embed_dim = 4;
    ec.num_classes = 3;
    ec.seed = seed;
    const DualEncoder m = init_model(ec);
    const Tensor x = random_matrix(rng, 10, 16, 0.0, 1.0);
    std::vector<std::size_t> y(10);
    for (auto& v : y) v = rng() % 3;
    AttackConfig cfg = AttackConfig::pgd10(static_cast<double>(seed % 9) / 255.0);
    cfg.restarts = seed % 3;
    cfg.step_size = (seed % 2 ? 2.0 : 1.0) / 255.0;
    cfg.seed = seed;
    check(m, x, y, cfg, "random model seed " + std::to_string(seed));
  }

  SyntheticSpec spec;
  spec.train_count = 400;
  spec.test_count = 100;
  auto [train, test] = generate_synthetic(spec);
  EncoderConfig ec;
  ec.input_dim = spec.pixels();
  ec.num_classes = spec.num_classes();
  DualEncoder m = init_model(ec);
  TrainConfig pc = TrainConfig::pretrain();
  pc.epochs = 5;
  pretrain_clean(m, train, pc);
  for (int k : {0, 1, 4, 8, 16})
    for (const AttackConfig& base : {AttackConfig::pgd10(k / 255.0), AttackConfig::strong(k / 255.0)})
      check(m, test.images, test.labels, base, "trained model eps " + std::to_string(k) + "/255");

  AttackConfig a = AttackConfig::strong(8.0 / 255.0), b = a;
  b.seed = a.seed + 1;
  const Tensor text = encode_classes(m);
  o.require(!(pgd_attack(m, text, test.images, test.labels, a) == pgd_attack(m, text, test.images, test.labels, b)),
            "different seeds gave identical restarts");
  o.detail << " " << runs << " attack runs: ball, range, eps=0 identity, bit-identical repeats";
}

// 6 and 7 ---------------------------------------------------------------------

struct SeedRun {
  double tecoa_clean = 0, tecoa_robust = 0;
  double tima_clean = 0, tima_robust = 0;
  double mhe_clean = 0;
  double teacher_min = 0, tima_min = 0, tima_gap = 0, mhe_gap = 0;
};

std::vector<SeedRun> trend_runs;
double trend_seconds = 0.0;

SeedRun run_seed(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  auto [train, test] = generate_synthetic(spec);
  EncoderConfig ec;
  ec.input_dim = spec.pixels();
  ec.num_classes = spec.num_classes();
  ec.seed = seed;
  DualEncoder teacher_model = init_model(ec);
  TrainConfig pc = TrainConfig::pretrain();
  pc.seed = seed;
  pretrain_clean(teacher_model, train, pc);
  const TeacherSnapshot teacher(teacher_model);
  AttackConfig attack = AttackConfig::pgd10(4.0 / 255.0);
  attack.seed = seed;

  SeedRun r;
  r.teacher_min = interclass_stats(teacher.class_text()).min;
  for (Variant v : {Variant::tecoa, Variant::tima, Variant::mhe_only}) {
    DualEncoder student = teacher_model;
    TrainConfig fc;
    fc.variant = v;
    fc.seed = seed;
    fc.train_attack.seed = seed;
    finetune(student, teacher, train, fc);
    const double clean = eval_clean(student, test);
    const Tensor text = encode_classes(student);
    if (v == Variant::tecoa) {
      r.tecoa_clean = clean;
      r.tecoa_robust = robust_accuracy(student, teacher, test, attack);
    } else if (v == Variant::tima) {
      r.tima_clean = clean;
      r.tima_robust = robust_accuracy(student, teacher, test, attack);
      r.tima_min = interclass_stats(text).min;
      r.tima_gap = superclass_block_gap(text, test.superclass_of);
    } else {
      r.mhe_clean = clean;
      r.mhe_gap = superclass_block_gap(text, test.superclass_of);
    }
  }
  return r;
}

void ensure_trend_runs() {
  if (!trend_runs.empty()) return;
  const auto t0 = Clock::now();
  for (std::uint64_t seed = 0; seed < 3; ++seed) trend_runs.push_back(run_seed(seed));
  trend_seconds = seconds_since(t0);
}

template <class F>
double mean_of(F&& f) {
  double s = 0.0;
  for (const auto& r : trend_runs) s += f(r);
  return s / static_cast<double>(trend_runs.size());
}

void end_to_end_criterion(Outcome& o) {
  ensure_trend_runs();
  const double tima_rob = mean_of([](const SeedRun& r) { return r.tima_robust; });
  const double tecoa_rob = mean_of([](const SeedRun& r) { return r.tecoa_robust; });
  const double tima_clean = mean_of([](const SeedRun& r) { return r.tima_clean; });
  const double tecoa_clean = mean_of([](const SeedRun& r) { return r.tecoa_clean; });
  o.require(tima_rob - tecoa_rob >= 0.05, "robust gap below 5 points");
  o.require(std::abs(tima_clean - tecoa_clean) <= 0.05, "clean accuracy differs by more than 5 points");
  o.require(trend_seconds < 600.0, "runtime >= 10 min");
  o.detail << " 3 seeds, PGD-10 at 4/255: tima " << 100 * tima_rob << "% vs tecoa " << 100 * tecoa_rob << "% (gap "
           << 100 * (tima_rob - tecoa_rob) << " pts); clean " << 100 * tima_clean << "% vs " << 100 * tecoa_clean
           << "%; " << trend_seconds << " s for pretraining plus 9 fine-tunes";
}

void geometry_criterion(Outcome& o) {
  ensure_trend_runs();
  for (std::size_t i = 0; i < trend_runs.size(); ++i) {
    const SeedRun& r = trend_runs[i];
    o.require(r.tima_min > r.teacher_min, "seed " + std::to_string(i) + " min text distance not above teacher");
    o.require(r.tima_gap > 0.0, "seed " + std::to_string(i) + " block gap not positive");
    o.detail << " seed " << i << ": min dist " << r.teacher_min << " -> " << r.tima_min << ", tima gap " << r.tima_gap
             << ", mhe_only gap " << r.mhe_gap << ";";
  }
  const double mhe_gap = mean_of([](const SeedRun& r) { return r.mhe_gap; });
  const double clean_drop =
      mean_of([](const SeedRun& r) { return r.tima_clean; }) - mean_of([](const SeedRun& r) { return r.mhe_clean; });
  o.require(mhe_gap <= 0.0 || clean_drop > 0.05, "mhe_only keeps the block structure and the clean accuracy");
  o.detail << " mhe_only mean gap " << mhe_gap << ", clean drop vs tima " << 100 * clean_drop << " pts";
}

// 8 ---------------------------------------------------------------------------

const char* kDeterminismConfig = R"(seed = 11
train_count = 400
test_count = 120
pretrain_epochs = 5
epochs = 2
eval_steps = 5
eps = 0, 1/255, 4/255
export_eps = 1/255, 4/255
)";

int cli(const std::vector<std::string>& args, const std::filesystem::path& log) {
  std::string cmd = std::string("\"") + TIMA_CLI_PATH + "\"";
  for (const auto& a : args) cmd += " \"" + a + "\"";
  cmd += " >> \"" + log.string() + "\" 2>&1";
  return std::system(cmd.c_str());
}

std::map<std::string, io::Bytes> artifacts(const std::filesystem::path& root) {
  std::map<std::string, io::Bytes> out;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().extension() == ".log") continue;
    out[std::filesystem::relative(e.path(), root).generic_string()] = io::read_file(e.path());
  }
  return out;
}

void determinism_criterion(Outcome& o) {
  const auto base = std::filesystem::temp_directory_path() / "tima_acceptance";
  std::filesystem::remove_all(base);
  std::filesystem::create_directories(base);
  const auto cfg = base / "run.cfg";
  io::write_text(cfg, kDeterminismConfig);

  std::vector<std::map<std::string, io::Bytes>> runs;
  for (const char* name : {"a", "b"}) {
    const auto dir = base / name;
    std::filesystem::create_directories(dir);
    const auto log = dir / "cli.log";
    for (const char* sub : {"gen-data", "pretrain", "finetune", "eval", "export-matrices"}) {
      const int status = cli({sub, "--config", cfg.string(), "--out", dir.string()}, log);
      o.require(status == 0, std::string(name) + ": " + sub + " exited nonzero");
    }
    runs.push_back(artifacts(dir));
  }
  std::size_t csv = 0, pgm = 0, json = 0, differing = 0;
  for (const auto& [path, bytes] : runs[0]) {
    const auto it = runs[1].find(path);
    if (it == runs[1].end() || it->second != bytes) {
      ++differing;
      o.require(false, path + " differs");
    }
    const auto ext = std::filesystem::path(path).extension();
    csv += ext == ".csv";
    pgm += ext == ".pgm";
    json += ext == ".json";
  }
  o.require(runs[0].size() == runs[1].size(), "artifact sets differ");
  o.require(runs[0].count("report.json") == 1, "no report.json");
  o.require(csv > 0 && pgm > 0, "no matrices exported");
  o.detail << " two runs of gen-data/pretrain/finetune/eval/export-matrices: " << runs[0].size() << " files (" << json
           << " json, " << csv << " csv, " << pgm << " pgm), " << differing << " differ";
}

}  // namespace

int main() {
  report(1, "gradient oracle", gradient_oracle_criterion);
  report(2, "analytic loss values", analytic_values_criterion);
  report(3, "MHE simplex convergence", simplex_criterion);
  report(4, "TeCoA reduction", tecoa_reduction_criterion);
  report(5, "PGD contracts", pgd_contracts_criterion);
  report(6, "end-to-end robustness trend", end_to_end_criterion);
  report(7, "text geometry trend", geometry_criterion);
  report(8, "CLI determinism", determinism_criterion);
  std::printf("%d of 8 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
