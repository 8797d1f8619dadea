#include "ssmavs/harness.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "ssmavs/adamw.hpp"
#include "ssmavs/checkpoint.hpp"
#include "ssmavs/common.hpp"
#include "ssmavs/gradcheck.hpp"
#include "ssmavs/metrics.hpp"
#include "ssmavs/ops.hpp"
#include "ssmavs/pca.hpp"
#include "ssmavs/rng.hpp"
#include "ssmavs/scan_layout.hpp"
#include "ssmavs/ssm.hpp"
#include "ssmavs/tensor_io.hpp"

namespace fs = std::filesystem;

namespace ssmavs {
namespace {

std::string num(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "cannot create " + path);
  out << text;
  check(out.good(), "write failed for " + path);
}

// Exclusive ownership of an output directory for the process lifetime.
struct LockFile {
  std::string path;
  int fd = -1;

  explicit LockFile(const std::string& p) : path(p) {
    fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    check(fd >= 0,
          "output directory is busy: lock file already exists at " + path);
    const std::string pid = std::to_string(::getpid()) + "\n";
    const auto n = ::write(fd, pid.data(), pid.size());
    (void)n;
  }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;
  ~LockFile() {
    if (fd >= 0) {
      ::close(fd);
      ::unlink(path.c_str());
    }
  }
};

i64 require_int(const nlohmann::json& j, const std::string& key) {
  check(j.contains(key), "run config: missing key '" + key + "'");
  check(j.at(key).is_number_integer(),
        "run config: key '" + key + "' must be an integer");
  return j.at(key).get<i64>();
}

}  // namespace

void RunConfig::validate() const {
  check(!model_config.empty(), "run config: model_config path is empty");
  check(!output_dir.empty(), "run config: output_dir is empty");
  task_from_string(task);
  check(steps >= 0, "run config: steps must be >= 0");
  check(batch_size >= 1, "run config: batch_size must be >= 1");
  check(std::isfinite(learning_rate) && learning_rate > 0,
        "run config: learning_rate must be positive");
  check(direction_count == 0 ||
            (direction_count >= 2 && direction_count <= 12 &&
             direction_count % 2 == 0),
        "run config: direction_count must be 0 or one of {2,4,6,8,10,12}");
  check(!bench_lengths.empty(), "run config: bench_lengths is empty");
  for (i64 l : bench_lengths) {
    check(l >= 2, "run config: bench lengths must be >= 2");
  }
  check(bench_reps >= 1, "run config: bench_reps must be >= 1");
  check(eval_every >= 1, "run config: eval_every must be >= 1");
  check(heldout_clips >= 1, "run config: heldout_clips must be >= 1");
  check(frames == 0 || frames == 5 || frames == 10,
        "run config: frames must be 0, 5, or 10");
  check(stop_at_mj >= 0 && stop_at_mj <= 1,
        "run config: stop_at_mj must lie in [0,1]");
}

RunConfig RunConfig::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    fail(std::string("run config: parse error: ") + e.what());
  }
  check(j.is_object(), "run config: top level must be an object");
  const std::set<std::string> known = {
      "model_config", "task",        "seed",          "steps",
      "batch_size",   "learning_rate", "output_dir",  "direction_count",
      "bench_lengths", "bench_reps", "eval_every",    "heldout_clips",
      "frames",       "augment",     "stop_at_mj"};
  for (const auto& item : j.items()) {
    check(known.count(item.key()) > 0,
          "run config: unknown key '" + item.key() + "'");
  }
  RunConfig rc;
  check(j.contains("model_config") && j.at("model_config").is_string(),
        "run config: 'model_config' must be a string path");
  rc.model_config = j.at("model_config").get<std::string>();
  check(j.contains("task") && j.at("task").is_string(),
        "run config: 'task' must be a string");
  rc.task = j.at("task").get<std::string>();
  check(j.contains("seed") && j.at("seed").is_number_unsigned(),
        "run config: 'seed' must be a non-negative integer");
  rc.seed = j.at("seed").get<u64>();
  rc.steps = require_int(j, "steps");
  rc.batch_size = require_int(j, "batch_size");
  check(j.contains("learning_rate") && j.at("learning_rate").is_number(),
        "run config: 'learning_rate' must be a number");
  rc.learning_rate = j.at("learning_rate").get<double>();
  check(j.contains("output_dir") && j.at("output_dir").is_string(),
        "run config: 'output_dir' must be a string path");
  rc.output_dir = j.at("output_dir").get<std::string>();

  if (j.contains("direction_count")) {
    rc.direction_count = static_cast<int>(require_int(j, "direction_count"));
  }
  if (j.contains("bench_lengths")) {
    check(j.at("bench_lengths").is_array(),
          "run config: 'bench_lengths' must be an array");
    rc.bench_lengths.clear();
    for (const auto& v : j.at("bench_lengths")) {
      check(v.is_number_integer(),
            "run config: bench lengths must be integers");
      rc.bench_lengths.push_back(v.get<i64>());
    }
  }
  if (j.contains("bench_reps")) rc.bench_reps = require_int(j, "bench_reps");
  if (j.contains("eval_every")) rc.eval_every = require_int(j, "eval_every");
  if (j.contains("heldout_clips")) {
    rc.heldout_clips = require_int(j, "heldout_clips");
  }
  if (j.contains("frames")) rc.frames = require_int(j, "frames");
  if (j.contains("augment")) {
    check(j.at("augment").is_boolean(),
          "run config: 'augment' must be a boolean");
    rc.augment = j.at("augment").get<bool>();
  }
  if (j.contains("stop_at_mj")) {
    check(j.at("stop_at_mj").is_number(),
          "run config: 'stop_at_mj' must be a number");
    rc.stop_at_mj = j.at("stop_at_mj").get<double>();
  }
  rc.validate();
  return rc;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  return from_json(read_file(path));
}

std::string RunConfig::to_json() const {
  nlohmann::ordered_json j;
  j["model_config"] = model_config;
  j["task"] = task;
  j["seed"] = seed;
  j["steps"] = steps;
  j["batch_size"] = batch_size;
  j["learning_rate"] = learning_rate;
  j["output_dir"] = output_dir;
  j["direction_count"] = direction_count;
  j["bench_lengths"] = bench_lengths;
  j["bench_reps"] = bench_reps;
  j["eval_every"] = eval_every;
  j["heldout_clips"] = heldout_clips;
  j["frames"] = frames;
  j["augment"] = augment;
  j["stop_at_mj"] = stop_at_mj;
  return j.dump(2) + "\n";
}

Tensor targets_from_masks(const Tensor& masks, bool semantic) {
  check(masks.rank() == 3, "targets: masks must be [T,h,w]");
  const i64 T = masks.shape()[0], h = masks.shape()[1], w = masks.shape()[2];
  const i64 K = semantic ? kShapeClasses : 1;
  Tensor out = Tensor::zeros({T, h, w, K}, Dtype::F32);
  float* o = out.mut<float>();
  for (i64 i = 0; i < T * h * w; ++i) {
    const int cls = static_cast<int>(masks.scalar_at(i));
    if (cls <= 0) continue;
    check(cls <= kShapeClasses, "targets: mask class id out of range");
    o[i * K + (semantic ? cls - 1 : 0)] = 1.0f;
  }
  return out;
}

std::vector<ClipSample> heldout_set(const RunConfig& rc) {
  Rng stream = Rng(rc.seed).fork(2);
  return generate(task_from_string(rc.task), stream.next_u64(),
                  rc.heldout_clips, rc.frames);
}

EvalOutcome evaluate_model(ParamStore& ps, const ModelConfig& mc,
                           const std::vector<ClipSample>& clips,
                           int direction_override, double beta2) {
  check(!clips.empty(), "evaluate: no clips");
  const bool semantic = clips[0].task == Task::Semantic;
  check(mc.N_class == (semantic ? kShapeClasses : 1),
        "evaluate: model N_class does not match the task");
  MetricAccumulator acc;
  double loss_sum = 0;
  for (const ClipSample& clip : clips) {
    const Tensor targets =
        pad_frames(targets_from_masks(clip.masks, semantic), mc.T_max);
    Tape t(Dtype::F32);
    ops::ModelOutput out = ops::model_forward(
        t, ps, mc, clip.video, clip.audio, ScanImpl::Sequential,
        direction_override);
    Var probs = ops::bilinear_up2(
        t, ops::bilinear_up2(t, ops::sigmoid(t, out.logits)));
    Var loss =
        ops::segmentation_loss(t, out.logits, targets, out.validity, semantic);
    loss_sum += t.val(loss).item();
    acc.add_clip(t.val(probs), targets, out.validity);
  }
  EvalOutcome ev;
  ev.m_j = acc.m_j();
  ev.m_f = acc.m_f(beta2);
  ev.frames = acc.frames;
  ev.silent_empty = acc.silent_empty_rate();
  ev.mean_loss = loss_sum / static_cast<double>(clips.size());
  return ev;
}

TrainOutcome train_model(ParamStore& ps, const ModelConfig& mc,
                         const RunConfig& rc, std::ostream* metrics_csv) {
  rc.validate();
  mc.validate();
  const Task task = task_from_string(rc.task);
  const bool semantic = task == Task::Semantic;
  check(mc.N_class == (semantic ? kShapeClasses : 1),
        "train: model N_class does not match the task");
  check(ps.size() == 0, "train: parameter store must start empty");

  const Rng base(rc.seed);
  Rng init_rng = base.fork(0);
  init_model_params(ps, mc, init_rng);
  Rng data_stream = base.fork(1);
  const u64 train_seed = data_stream.next_u64();
  Rng aug_stream = base.fork(3);

  const std::vector<ClipSample> heldout = heldout_set(rc);
  AdamWConfig oc;
  oc.lr = rc.learning_rate;
  AdamW opt(ps, oc);

  EvalOutcome ev = evaluate_model(ps, mc, heldout, rc.direction_count);
  if (metrics_csv) *metrics_csv << "step,loss,M_J,M_F\n";
  auto row = [&](i64 step, double loss) {
    if (metrics_csv) {
      *metrics_csv << step << ',' << num(loss) << ',' << num(ev.m_j) << ','
                   << num(ev.m_f) << '\n';
      metrics_csv->flush();
    }
  };
  row(0, ev.mean_loss);
  TrainOutcome out{0, ev.mean_loss, ev};

  for (i64 step = 1; step <= rc.steps; ++step) {
    ps.zero_grad();
    double batch_loss = 0;
    for (i64 b = 0; b < rc.batch_size; ++b) {
      const i64 idx = (step - 1) * rc.batch_size + b;
      ClipSample s = generate_clip(task, train_seed, idx, rc.frames);
      if (rc.augment) s = augment(s, aug_stream.next_u64());
      const Tensor targets =
          pad_frames(targets_from_masks(s.masks, semantic), mc.T_max);
      Tape t(Dtype::F32);
      ops::ModelOutput mo = ops::model_forward(
          t, ps, mc, s.video, s.audio, ScanImpl::Sequential,
          rc.direction_count);
      Var loss = ops::segmentation_loss(t, mo.logits, targets, mo.validity,
                                        semantic);
      const double lv = t.val(loss).item();
      check(std::isfinite(lv),
            "train: loss became non-finite at step " + std::to_string(step) +
                " (clip " + std::to_string(idx) + "); aborting");
      batch_loss += lv / static_cast<double>(rc.batch_size);
      t.backward(loss, 1.0 / static_cast<double>(rc.batch_size));
    }
    opt.step();
    const bool refresh = step % rc.eval_every == 0 || step == rc.steps;
    if (refresh) ev = evaluate_model(ps, mc, heldout, rc.direction_count);
    row(step, batch_loss);
    out.steps_run = step;
    out.final_loss = batch_loss;
    out.final_eval = ev;
    if (refresh && rc.stop_at_mj > 0 && ev.m_j >= rc.stop_at_mj) break;
  }
  return out;
}

void write_ppm(const std::string& path, const Tensor& rgb) {
  check(rgb.rank() == 3 && rgb.shape()[2] == 3, "ppm: image must be [h,w,3]");
  const i64 h = rgb.shape()[0], w = rgb.shape()[1];
  std::ofstream out(path, std::ios::binary);
  check(out.good(), "ppm: cannot create " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::string payload(static_cast<size_t>(h * w * 3), '\0');
  for (i64 i = 0; i < h * w * 3; ++i) {
    const double v = std::clamp(rgb.scalar_at(i), 0.0, 1.0);
    payload[static_cast<size_t>(i)] =
        static_cast<char>(static_cast<unsigned char>(v * 255.0 + 0.5));
  }
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  check(out.good(), "ppm: write failed for " + path);
}

Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  check(in.good(), "ppm: cannot open " + path);
  std::string magic;
  in >> magic;
  check(magic == "P6", "ppm: bad magic in " + path);
  i64 w = 0, h = 0, maxval = 0;
  in >> w >> h >> maxval;
  check(in.good() && w >= 1 && h >= 1, "ppm: bad header in " + path);
  check(maxval == 255, "ppm: expected maxval 255 in " + path);
  in.get();
  std::string payload(static_cast<size_t>(h * w * 3), '\0');
  in.read(payload.data(), static_cast<std::streamsize>(payload.size()));
  check(in.gcount() == static_cast<std::streamsize>(payload.size()),
        "ppm: truncated payload in " + path);
  Tensor out = Tensor::zeros({h, w, 3}, Dtype::F32);
  float* o = out.mut<float>();
  for (i64 i = 0; i < h * w * 3; ++i) {
    o[i] = static_cast<float>(static_cast<unsigned char>(
               payload[static_cast<size_t>(i)])) /
           255.0f;
  }
  return out;
}

Tensor overlay_feature(const Tensor& frame_rgb, const Tensor& gray) {
  check(frame_rgb.rank() == 3 && frame_rgb.shape()[2] == 3,
        "overlay: frame must be [H,W,3]");
  check(gray.rank() == 2, "overlay: feature map must be [h,w]");
  const i64 H = frame_rgb.shape()[0], W = frame_rgb.shape()[1];
  const i64 h = gray.shape()[0], w = gray.shape()[1];
  check(h >= 1 && w >= 1 && H % h == 0 && W % w == 0,
        "overlay: frame extent must be a multiple of the feature extent");
  Tensor out = Tensor::zeros({H, W, 3}, Dtype::F32);
  float* o = out.mut<float>();
  for (i64 y = 0; y < H; ++y) {
    for (i64 x = 0; x < W; ++x) {
      const double g = gray.scalar_at((y * h / H) * w + (x * w / W));
      for (i64 c = 0; c < 3; ++c) {
        o[(y * W + x) * 3 + c] = static_cast<float>(
            0.7 * g + 0.3 * frame_rgb.scalar_at((y * W + x) * 3 + c));
      }
    }
  }
  return out;
}

namespace {

ModelConfig load_model_config(const std::string& path) {
  ModelConfig mc = ModelConfig::from_json_file(path);
  mc.validate();
  return mc;
}

void load_model(ParamStore& ps, const ModelConfig& mc,
                const std::string& checkpoint) {
  Rng rng(0);
  init_model_params(ps, mc, rng);
  load_checkpoint(ps, checkpoint);
}

int cmd_train(const std::string& config_path) {
  RunConfig rc = RunConfig::from_json_file(config_path);
  const ModelConfig mc = load_model_config(rc.model_config);
  fs::create_directories(rc.output_dir);
  LockFile lock(rc.output_dir + "/lock");
  write_file(rc.output_dir + "/run_config.json", rc.to_json());
  write_file(rc.output_dir + "/model_config.json", read_file(rc.model_config));

  std::ofstream csv(rc.output_dir + "/metrics.csv", std::ios::binary);
  check(csv.good(), "cannot create metrics.csv in " + rc.output_dir);
  ParamStore ps;
  const TrainOutcome out = train_model(ps, mc, rc, &csv);
  csv.close();
  save_checkpoint(ps, rc.output_dir + "/checkpoint");
  std::printf("trained %lld steps: loss %s, M_J %s, M_F %s\n",
              static_cast<long long>(out.steps_run), num(out.final_loss).c_str(),
              num(out.final_eval.m_j).c_str(), num(out.final_eval.m_f).c_str());
  return 0;
}

int cmd_eval(const std::string& model_config, const std::string& checkpoint,
             const std::string& task, u64 seed, i64 clips, i64 frames,
             int direction_count, double beta2, const std::string& out_path) {
  const ModelConfig mc = load_model_config(model_config);
  ParamStore ps;
  load_model(ps, mc, checkpoint);
  RunConfig rc;
  rc.model_config = model_config;
  rc.output_dir = "-";
  rc.task = task;
  rc.seed = seed;
  rc.heldout_clips = clips;
  rc.frames = frames;
  rc.direction_count = direction_count;
  rc.validate();
  const EvalOutcome ev =
      evaluate_model(ps, mc, heldout_set(rc), direction_count, beta2);
  nlohmann::ordered_json j;
  j["M_J"] = ev.m_j;
  j["M_F"] = ev.m_f;
  j["frames"] = ev.frames;
  const std::string text = j.dump() + "\n";
  if (out_path.empty()) {
    std::fputs(text.c_str(), stdout);
  } else {
    write_file(out_path, text);
  }
  return 0;
}

int cmd_ablate(const std::string& config_path) {
  RunConfig rc = RunConfig::from_json_file(config_path);
  const ModelConfig mc = load_model_config(rc.model_config);
  fs::create_directories(rc.output_dir);
  LockFile lock(rc.output_dir + "/lock");
  write_file(rc.output_dir + "/run_config.json", rc.to_json());

  std::ofstream csv(rc.output_dir + "/ablate.csv", std::ios::binary);
  check(csv.good(), "cannot create ablate.csv in " + rc.output_dir);
  csv << "directions,M_J,M_F,steps,seed\n";
  for (int dc : {2, 4, 6, 8, 10, 12}) {
    RunConfig sub = rc;
    sub.direction_count = dc;
    ParamStore ps;
    const TrainOutcome out = train_model(ps, mc, sub, nullptr);
    csv << dc << ',' << num(out.final_eval.m_j) << ','
        << num(out.final_eval.m_f) << ',' << out.steps_run << ',' << rc.seed
        << '\n';
    std::printf("directions %d: M_J %s, M_F %s\n", dc,
                num(out.final_eval.m_j).c_str(),
                num(out.final_eval.m_f).c_str());
  }
  return 0;
}

double benchmark_once(const ScanCoeffs& c, const Tensor& A,
                      const Tensor& D_skip, ScanImpl impl) {
  const auto start = std::chrono::steady_clock::now();
  Tensor y = scan_core(c, A, D_skip, impl);
  const auto stop = std::chrono::steady_clock::now();
  (void)y;
  return static_cast<double>(
      std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start)
          .count());
}

int cmd_bench(std::vector<i64> lengths, i64 reps, i64 depth, i64 state,
              u64 seed, const std::string& out_path) {
  check(!lengths.empty(), "bench: length sweep is empty");
  check(reps >= 1 && depth >= 1 && state >= 1, "bench: bad parameters");
  std::ofstream csv(out_path, std::ios::binary);
  check(csv.good(), "bench: cannot create " + out_path);
  csv << "L,D,N,impl,mean_ns,std_ns\n";

  std::vector<double> log_l, log_t;
  for (i64 L : lengths) {
    Rng rng = Rng(seed).fork(static_cast<u64>(L));
    ScanCoeffs c;
    c.u = rng.normal_tensor({L, depth}, 0, 1, Dtype::F32);
    c.delta = rng.uniform_tensor({L, depth}, 1e-3, 0.1, Dtype::F32);
    c.B = rng.normal_tensor({L, state}, 0, 1, Dtype::F32);
    c.C = rng.normal_tensor({L, state}, 0, 1, Dtype::F32);
    const Tensor A = rng.uniform_tensor({depth, state}, -2.0, -0.05, Dtype::F32);
    const Tensor D_skip = rng.normal_tensor({depth}, 0, 1, Dtype::F32);

    const Tensor y_seq = scan_core(c, A, D_skip, ScanImpl::Sequential);
    const Tensor y_par = scan_core(c, A, D_skip, ScanImpl::Parallel);
    double max_abs = 0, max_diff = 0;
    for (i64 i = 0; i < y_seq.numel(); ++i) {
      max_abs = std::max(max_abs, std::abs(y_seq.scalar_at(i)));
      max_diff = std::max(
          max_diff, std::abs(y_seq.scalar_at(i) - y_par.scalar_at(i)));
    }
    check(max_diff < 1e-5 * std::max(max_abs, 1e-300),
          "bench: parallel scan diverged from sequential at L=" +
              std::to_string(L));

    for (ScanImpl impl : {ScanImpl::Sequential, ScanImpl::Parallel}) {
      double sum = 0, sq = 0;
      for (i64 r = 0; r < reps; ++r) {
        const double ns = benchmark_once(c, A, D_skip, impl);
        sum += ns;
        sq += ns * ns;
      }
      const double mean = sum / static_cast<double>(reps);
      const double var = std::max(0.0, sq / static_cast<double>(reps) -
                                           mean * mean);
      csv << L << ',' << depth << ',' << state << ','
          << (impl == ScanImpl::Sequential ? "sequential" : "parallel") << ','
          << num(mean) << ',' << num(std::sqrt(var)) << '\n';
      if (impl == ScanImpl::Sequential) {
        log_l.push_back(std::log(static_cast<double>(L)));
        log_t.push_back(std::log(std::max(1.0, mean)));
      }
    }
  }
  double mx = 0, my = 0;
  for (size_t i = 0; i < log_l.size(); ++i) {
    mx += log_l[i];
    my += log_t[i];
  }
  mx /= static_cast<double>(log_l.size());
  my /= static_cast<double>(log_l.size());
  double cov = 0, var = 0;
  for (size_t i = 0; i < log_l.size(); ++i) {
    cov += (log_l[i] - mx) * (log_t[i] - my);
    var += (log_l[i] - mx) * (log_l[i] - mx);
  }
  const double slope = var > 0 ? cov / var : 0.0;
  std::printf("slope %s\n", num(slope).c_str());
  return 0;
}

// Per-frame min-max normalized projection of a [T,h,w,C] feature map onto
// its first principal channel direction.
Tensor pca_gray(const Tensor& feat, i64 frame) {
  const i64 h = feat.shape()[1], w = feat.shape()[2], c = feat.shape()[3];
  const i64 T = feat.shape()[0];
  Tensor rows = Tensor::zeros({T * h * w, c}, Dtype::F64);
  for (i64 i = 0; i < rows.numel(); ++i) {
    rows.set_scalar(i, feat.scalar_at(i));
  }
  const Tensor pc = principal_component(rows);
  const Tensor proj = pca_project(rows, pc);
  Tensor gray = Tensor::zeros({h, w}, Dtype::F64);
  double lo = 0, hi = 0;
  for (i64 i = 0; i < h * w; ++i) {
    const double v = proj.scalar_at(frame * h * w + i);
    if (i == 0 || v < lo) lo = v;
    if (i == 0 || v > hi) hi = v;
  }
  if (hi - lo < 1e-12) return gray;
  for (i64 i = 0; i < h * w; ++i) {
    gray.set_scalar(i,
                    (proj.scalar_at(frame * h * w + i) - lo) / (hi - lo));
  }
  return gray;
}

Tensor frame_of(const Tensor& video, i64 t) {
  const i64 h = video.shape()[1], w = video.shape()[2];
  Tensor out = Tensor::zeros({h, w, 3}, Dtype::F32);
  float* o = out.mut<float>();
  for (i64 i = 0; i < h * w * 3; ++i) {
    o[i] = static_cast<float>(video.scalar_at(t * h * w * 3 + i));
  }
  return out;
}

int cmd_dump_features(const std::string& model_config,
                      const std::string& checkpoint, const std::string& task,
                      u64 seed, i64 index, i64 frames,
                      const std::string& out_dir) {
  const ModelConfig mc = load_model_config(model_config);
  ParamStore ps;
  load_model(ps, mc, checkpoint);
  const ClipSample s =
      generate_clip(task_from_string(task), seed, index, frames);
  const i64 T = s.video.shape()[0];

  Tape t(Dtype::F32);
  ops::ModelOutput out =
      ops::model_forward(t, ps, mc, s.video, s.audio);
  fs::create_directories(out_dir);
  int files = 0;
  for (size_t k = 0; k < out.pre_cip.size(); ++k) {
    save_tensor(t.val(out.pre_cip[k]),
                out_dir + "/pre_cip_scale" + std::to_string(k + 1) + ".nst");
    ++files;
  }
  save_tensor(t.val(out.mask_feature), out_dir + "/post_cip.nst");
  ++files;

  const std::pair<const char*, Var> maps[2] = {
      {"pre", out.pre_cip[0]}, {"post", out.mask_feature}};
  for (const auto& [tag, var] : maps) {
    const Tensor& feat = t.val(var);
    for (i64 f = 0; f < T; ++f) {
      const Tensor overlay =
          overlay_feature(frame_of(s.video, f), pca_gray(feat, f));
      write_ppm(out_dir + "/overlay_" + tag + "_f" + std::to_string(f) +
                    ".ppm",
                overlay);
      ++files;
    }
  }
  std::printf("wrote %d files to %s\n", files, out_dir.c_str());
  return 0;
}

int cmd_layout_dump(const std::string& mode, i64 T, i64 h, i64 w,
                    int direction_count, bool audio,
                    const std::string& out_path) {
  const ScaleShape shape{h, w};
  LayoutSpec spec;
  if (mode == "ss2d") {
    spec = layout_ss2d({shape}, T, audio);
  } else if (mode == "3d") {
    spec = layout_3d({shape}, T, direction_count);
  } else if (mode == "v2a") {
    spec = layout_temporal_audio(shape, T, false);
  } else if (mode == "a2v") {
    spec = layout_temporal_audio(shape, T, true);
  } else {
    fail("layout-dump: mode must be ss2d, 3d, v2a, or a2v");
  }
  std::ofstream csv(out_path, std::ios::binary);
  check(csv.good(), "layout-dump: cannot create " + out_path);
  csv << "direction,sequence_position,t,y,x,audio_slot\n";
  for (size_t d = 0; d < spec.seqs.size(); ++d) {
    const SeqSpec& seq = spec.seqs[d];
    for (i64 p = 0; p < spec.seq_len; ++p) {
      const RowCoord rc = decode_row({shape}, T, seq.perm[p]);
      if (rc.is_audio) {
        csv << d << ',' << p << ',' << rc.t << ",-1,-1,1\n";
      } else {
        csv << d << ',' << p << ',' << rc.t << ',' << rc.y << ',' << rc.x
            << ",0\n";
      }
    }
  }
  std::printf("wrote %zu sequences of length %lld to %s\n", spec.seqs.size(),
              static_cast<long long>(spec.seq_len), out_path.c_str());
  return 0;
}

int cmd_dataset_dump(const std::string& task, u64 seed, i64 count, i64 frames,
                     const std::string& out_dir) {
  check(count >= 1, "dataset-dump: count must be >= 1");
  const Task tk = task_from_string(task);
  fs::create_directories(out_dir);
  nlohmann::ordered_json manifest;
  manifest["task"] = task;
  manifest["seed"] = seed;
  manifest["samples"] = nlohmann::ordered_json::array();
  for (i64 i = 0; i < count; ++i) {
    const ClipSample s = generate_clip(tk, seed, i, frames);
    const std::string rel = "sample" + std::to_string(i);
    fs::create_directories(out_dir + "/" + rel);
    save_tensor(s.video, out_dir + "/" + rel + "/video.nst");
    save_tensor(s.audio, out_dir + "/" + rel + "/audio.nst");
    save_tensor(s.masks, out_dir + "/" + rel + "/masks.nst");
    nlohmann::ordered_json entry;
    entry["index"] = i;
    entry["T"] = s.video.shape()[0];
    entry["video"] = rel + "/video.nst";
    entry["audio"] = rel + "/audio.nst";
    entry["masks"] = rel + "/masks.nst";
    manifest["samples"].push_back(entry);
  }
  write_file(out_dir + "/manifest.json", manifest.dump(2) + "\n");
  std::printf("wrote %lld samples to %s\n", static_cast<long long>(count),
              out_dir.c_str());
  return 0;
}

FdReport run_fd_case(ParamStore& ps, const std::vector<std::string>& names,
                     const std::function<Var(Tape&)>& build, i64 coords) {
  auto loss = [&] {
    Tape t(Dtype::F64);
    return t.val(build(t)).item();
  };
  ps.zero_grad();
  {
    Tape t(Dtype::F64);
    t.backward(build(t));
  }
  Rng pick(99);
  return fd_check_params(ps, names, loss, coords, pick);
}

int cmd_gradcheck(i64 coords) {
  bool all_ok = true;
  auto report = [&](const char* name, const FdReport& rep) {
    all_ok = all_ok && rep.ok();
    std::printf("[%s] gradcheck %s: %s\n", rep.ok() ? "PASS" : "FAIL", name,
                rep.summary().c_str());
  };

  {
    ParamStore ps;
    Rng rng(1);
    ps.add("x", rng.normal_tensor({3, 4}, 0, 1, Dtype::F64));
    ps.add("w", rng.normal_tensor({4, 2}, 0, 1, Dtype::F64));
    ps.add("b", rng.normal_tensor({2}, 0, 1, Dtype::F64));
    const Tensor wt = Rng(7).normal_tensor({3, 2}, 0, 1, Dtype::F64);
    report("linear", run_fd_case(ps, {"x", "w", "b"}, [&](Tape& t) {
      Var y = ops::linear(t, t.param(ps.at("x")), t.param(ps.at("w")),
                          t.param(ps.at("b")));
      return ops::sum_all(t, ops::mul_const(t, y, wt));
    }, coords));
  }
  {
    ParamStore ps;
    Rng rng(2);
    ps.add("x", rng.normal_tensor({4, 5}, 0, 1, Dtype::F64));
    ps.add("g", rng.normal_tensor({5}, 1, 0.2, Dtype::F64));
    ps.add("be", rng.normal_tensor({5}, 0, 0.2, Dtype::F64));
    const Tensor wt = Rng(8).normal_tensor({4, 5}, 0, 1, Dtype::F64);
    report("layer_norm", run_fd_case(ps, {"x", "g", "be"}, [&](Tape& t) {
      Var y = ops::layer_norm(t, t.param(ps.at("x")), t.param(ps.at("g")),
                              t.param(ps.at("be")));
      return ops::sum_all(t, ops::mul_const(t, y, wt));
    }, coords));
  }
  {
    ParamStore ps;
    Rng rng(3);
    ps.add("x", rng.normal_tensor({6, 3}, 0, 1, Dtype::F64));
    ps.add("k", rng.normal_tensor({3, 3}, 0, 1, Dtype::F64));
    const Tensor wt = Rng(9).normal_tensor({6, 3}, 0, 1, Dtype::F64);
    report("causal_conv1d", run_fd_case(ps, {"x", "k"}, [&](Tape& t) {
      Var y = ops::causal_conv1d(t, t.param(ps.at("x")), t.param(ps.at("k")),
                                 Var{});
      return ops::sum_all(t, ops::mul_const(t, y, wt));
    }, coords));
  }
  {
    ParamStore ps;
    Rng rng(4);
    ps.add("x", rng.normal_tensor({2, 4, 4, 3}, 0, 1, Dtype::F64));
    ps.add("k", rng.normal_tensor({3, 3, 3}, 0, 1, Dtype::F64));
    const Tensor wt = Rng(10).normal_tensor({2, 4, 4, 3}, 0, 1, Dtype::F64);
    report("depthwise_conv2d", run_fd_case(ps, {"x", "k"}, [&](Tape& t) {
      Var y = ops::depthwise_conv2d(t, t.param(ps.at("x")),
                                    t.param(ps.at("k")), Var{});
      return ops::sum_all(t, ops::mul_const(t, y, wt));
    }, coords));
  }
  {
    ParamStore ps;
    Rng rng(5);
    ps.add("u", rng.normal_tensor({6, 3}, 0, 1, Dtype::F64));
    init_ssm_params(ps, "ssm", 3, 2, rng, Dtype::F64);
    const Tensor wt = Rng(11).normal_tensor({6, 3}, 0, 1, Dtype::F64);
    report("selective_scan",
           run_fd_case(ps,
                       {"u", "ssm.A_log", "ssm.W_dt", "ssm.W_B", "ssm.W_C",
                        "ssm.D_skip", "ssm.b_dt"},
                       [&](Tape& t) {
                         ops::SsmVars v = ops::bind_ssm(t, ps, "ssm");
                         Var y =
                             ops::selective_scan(t, t.param(ps.at("u")), v);
                         return ops::sum_all(t, ops::mul_const(t, y, wt));
                       },
                       coords));
  }
  {
    ParamStore ps;
    Rng rng(6);
    ps.add("x", rng.normal_tensor({2, 3, 4, 2}, 0, 1, Dtype::F64));
    const Tensor wt = Rng(12).normal_tensor({2, 6, 8, 2}, 0, 1, Dtype::F64);
    report("bilinear_up2", run_fd_case(ps, {"x"}, [&](Tape& t) {
      Var y = ops::bilinear_up2(t, t.param(ps.at("x")));
      return ops::sum_all(t, ops::mul_const(t, y, wt));
    }, coords));
  }
  return all_ok ? 0 : 1;
}

void validate_csv(const std::string& path, const std::string& header,
                  const std::vector<char>& kinds) {
  const std::string text = read_file(path);
  check(text.find('\r') == std::string::npos,
        "CSV must use LF line endings");
  std::istringstream in(text);
  std::string line;
  check(static_cast<bool>(std::getline(in, line)), "CSV is empty");
  check(line == header, "CSV header mismatch: got '" + line + "'");
  i64 rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string field;
    size_t col = 0;
    while (std::getline(ls, field, ',')) {
      check(col < kinds.size(), "CSV row has too many fields: " + line);
      size_t used = 0;
      if (kinds[col] == 'i') {
        (void)std::stoll(field, &used);
        check(used == field.size(), "CSV integer field malformed: " + field);
      } else if (kinds[col] == 'f') {
        (void)std::stod(field, &used);
        check(used == field.size(), "CSV number field malformed: " + field);
      } else {
        check(field == "sequential" || field == "parallel",
              "CSV impl field malformed: " + field);
      }
      ++col;
    }
    check(col == kinds.size(), "CSV row has too few fields: " + line);
    ++rows;
  }
  check(rows >= 1, "CSV has no data rows");
}

int cmd_validate_formats(const std::string& dir) {
  check(fs::is_directory(dir), "validate-formats: not a directory: " + dir);
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  int bad = 0, checked = 0, skipped = 0;
  for (const fs::path& p : files) {
    const std::string rel = fs::relative(p, dir).string();
    const std::string name = p.filename().string();
    const std::string ext = p.extension().string();
    try {
      if (name == "run_config.json") {
        RunConfig::from_json(read_file(p.string()));
      } else if (name == "model_config.json") {
        ModelConfig::from_json(read_file(p.string())).validate();
      } else if (name == "metrics.csv") {
        validate_csv(p.string(), "step,loss,M_J,M_F", {'i', 'f', 'f', 'f'});
      } else if (name == "ablate.csv") {
        validate_csv(p.string(), "directions,M_J,M_F,steps,seed",
                     {'i', 'f', 'f', 'i', 'i'});
      } else if (name == "bench.csv") {
        validate_csv(p.string(), "L,D,N,impl,mean_ns,std_ns",
                     {'i', 'i', 'i', 's', 'f', 'f'});
      } else if (name == "layout.csv") {
        validate_csv(p.string(), "direction,sequence_position,t,y,x,audio_slot",
                     {'i', 'i', 'i', 'i', 'i', 'i'});
      } else if (name == "eval.json") {
        const nlohmann::json j = nlohmann::json::parse(read_file(p.string()));
        check(j.is_object() && j.size() == 3 && j.contains("M_J") &&
                  j.contains("M_F") && j.contains("frames") &&
                  j.at("M_J").is_number() && j.at("M_F").is_number() &&
                  j.at("frames").is_number_integer(),
              "eval JSON must hold exactly M_J, M_F, frames");
      } else if (name == "manifest.json") {
        const nlohmann::json j = nlohmann::json::parse(read_file(p.string()));
        check(j.contains("task") && j.contains("seed") &&
                  j.contains("samples") && j.at("samples").is_array(),
              "dataset manifest must hold task, seed, samples");
        task_from_string(j.at("task").get<std::string>());
        for (const auto& s : j.at("samples")) {
          for (const char* key : {"video", "audio", "masks"}) {
            check(s.contains(key), "sample entry missing " + std::string(key));
            const fs::path ref =
                p.parent_path() / s.at(key).get<std::string>();
            check(fs::is_regular_file(ref),
                  "manifest references missing file " + ref.string());
          }
        }
      } else if (name == "manifest.txt") {
        std::istringstream in(read_file(p.string()));
        std::string line;
        while (std::getline(in, line)) {
          if (line.empty()) continue;
          const size_t tab = line.find('\t');
          check(tab != std::string::npos,
                "checkpoint manifest line lacks a tab: " + line);
          const fs::path ref = p.parent_path() / line.substr(tab + 1);
          check(fs::is_regular_file(ref),
                "checkpoint manifest references missing file " + ref.string());
        }
      } else if (ext == ".nst") {
        (void)load_tensor(p.string());
      } else if (ext == ".ppm") {
        (void)read_ppm(p.string());
      } else {
        ++skipped;
        std::printf("skip %s\n", rel.c_str());
        continue;
      }
      ++checked;
      std::printf("ok   %s\n", rel.c_str());
    } catch (const std::exception& e) {
      ++bad;
      std::fprintf(stderr, "invalid %s: %s\n", rel.c_str(), e.what());
    }
  }
  const fs::path ckpt = fs::path(dir) / "checkpoint" / "manifest.txt";
  const fs::path mcfg = fs::path(dir) / "model_config.json";
  if (fs::is_regular_file(ckpt) && fs::is_regular_file(mcfg)) {
    try {
      const ModelConfig mc = load_model_config(mcfg.string());
      ParamStore ps;
      load_model(ps, mc, (fs::path(dir) / "checkpoint").string());
      std::printf("ok   checkpoint matches model_config.json\n");
    } catch (const std::exception& e) {
      ++bad;
      std::fprintf(stderr, "invalid checkpoint: %s\n", e.what());
    }
  }
  std::printf("validated %d files, skipped %d, invalid %d\n", checked, skipped,
              bad);
  return bad == 0 ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"selective-scan audio-visual segmentation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  auto* train = app.add_subcommand("train", "train a model from a run config");
  train->add_option("--config", config_path, "run config JSON")->required();

  std::string e_model, e_ckpt, e_task = "s4", e_out;
  u64 e_seed = 0;
  i64 e_clips = 8, e_frames = 5;
  int e_dc = 0;
  double e_beta2 = 1.0;
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on fresh clips");
  ev->add_option("--model-config", e_model)->required();
  ev->add_option("--checkpoint", e_ckpt)->required();
  ev->add_option("--task", e_task);
  ev->add_option("--seed", e_seed);
  ev->add_option("--clips", e_clips);
  ev->add_option("--frames", e_frames);
  ev->add_option("--direction-count", e_dc);
  ev->add_option("--beta2", e_beta2, "beta^2 of the F-measure");
  ev->add_option("--out", e_out, "write JSON here instead of stdout");

  std::string a_config;
  auto* ab = app.add_subcommand("ablate-directions",
                                "train/evaluate every direction count");
  ab->add_option("--config", a_config, "run config JSON")->required();

  std::vector<i64> b_lengths = {256, 512, 1024, 2048, 4096, 8192, 16384};
  i64 b_reps = 3, b_depth = 16, b_state = 16;
  u64 b_seed = 0;
  std::string b_out = "bench.csv";
  auto* be = app.add_subcommand("bench-scan", "time the scan kernels over L");
  be->add_option("--lengths", b_lengths)->delimiter(',');
  be->add_option("--reps", b_reps);
  be->add_option("--depth", b_depth);
  be->add_option("--state", b_state);
  be->add_option("--seed", b_seed);
  be->add_option("--out", b_out);

  std::string d_model, d_ckpt, d_task = "s4", d_out;
  u64 d_seed = 0;
  i64 d_index = 0, d_frames = 5;
  auto* df = app.add_subcommand("dump-features",
                                "write feature maps and PCA overlays");
  df->add_option("--model-config", d_model)->required();
  df->add_option("--checkpoint", d_ckpt)->required();
  df->add_option("--task", d_task);
  df->add_option("--seed", d_seed);
  df->add_option("--index", d_index);
  df->add_option("--frames", d_frames);
  df->add_option("--out-dir", d_out)->required();

  std::string l_mode = "ss2d", l_out = "layout.csv";
  i64 l_frames = 2, l_h = 4, l_w = 4;
  int l_dc = 4;
  bool l_audio = false;
  auto* ld = app.add_subcommand("layout-dump",
                                "write a serialization table as CSV");
  ld->add_option("--mode", l_mode, "ss2d, 3d, v2a, or a2v");
  ld->add_option("--frames", l_frames);
  ld->add_option("--height", l_h);
  ld->add_option("--width", l_w);
  ld->add_option("--direction-count", l_dc, "3d mode only");
  ld->add_flag("--audio", l_audio, "attach audio tokens (ss2d mode)");
  ld->add_option("--out", l_out);

  std::string s_task = "s4", s_out;
  u64 s_seed = 0;
  i64 s_count = 4, s_frames = 0;
  auto* dd = app.add_subcommand("dataset-dump",
                                "write generated samples and a manifest");
  dd->add_option("--task", s_task);
  dd->add_option("--seed", s_seed);
  dd->add_option("--count", s_count);
  dd->add_option("--frames", s_frames);
  dd->add_option("--out-dir", s_out)->required();

  i64 g_coords = 6;
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference spot checks of core ops");
  gc->add_option("--coords", g_coords, "coordinates sampled per tensor");

  std::string v_dir;
  auto* vf = app.add_subcommand("validate-formats",
                                "re-read and verify emitted files");
  vf->add_option("--dir", v_dir)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train->parsed()) return cmd_train(config_path);
    if (ev->parsed()) {
      return cmd_eval(e_model, e_ckpt, e_task, e_seed, e_clips, e_frames,
                      e_dc, e_beta2, e_out);
    }
    if (ab->parsed()) return cmd_ablate(a_config);
    if (be->parsed()) {
      return cmd_bench(b_lengths, b_reps, b_depth, b_state, b_seed, b_out);
    }
    if (df->parsed()) {
      return cmd_dump_features(d_model, d_ckpt, d_task, d_seed, d_index,
                               d_frames, d_out);
    }
    if (ld->parsed()) {
      return cmd_layout_dump(l_mode, l_frames, l_h, l_w, l_dc, l_audio,
                             l_out);
    }
    if (dd->parsed()) {
      return cmd_dataset_dump(s_task, s_seed, s_count, s_frames, s_out);
    }
    if (gc->parsed()) return cmd_gradcheck(g_coords);
    if (vf->parsed()) return cmd_validate_formats(v_dir);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}

}  // namespace ssmavs
