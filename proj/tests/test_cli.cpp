#include <doctest.h>
#include <sys/wait.h>

#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pcd/checkpoint.hpp"
#include "pcd/data.hpp"
#include "pcd/gradcheck.hpp"

using namespace pcd;
namespace fs = std::filesystem;

namespace {

const fs::path kRoot = fs::temp_directory_path() / "pcd_test_cli";

struct Result {
  int code = -1;
  std::string out;
};

Result pcdet(const std::string& args) {
  const fs::path log = kRoot / "last_output.txt";
  const std::string cmd = std::string(PCDET_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  r.out = read_file(log.string());
  return r;
}

std::string path(const std::string& name) { return (kRoot / name).string(); }

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string l;
  while (std::getline(ss, l)) {
    if (!l.empty()) out.push_back(l);
  }
  return out;
}

// Shared fixture: tiny recipe, two small datasets and a one-epoch teacher.
struct Workspace {
  Workspace() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);
    data::SceneGenConfig scenes;
    scenes.extent = {14, 14, 3};
    scenes.objects = {2, 3};
    scenes.surface_density = 8;
    scenes.clutter_density = 0.3;
    scenes.noise_points = 10;
    write_file_atomic(path("scenes.cfg"), scenes.serialize());
    PipelineConfig cfg = gradcheck::toy_config();
    cfg.epochs = 1;
    cfg.batch_size = 2;
    write_file_atomic(path("pipeline.cfg"), cfg.serialize());
    cfg.lr = 1e300;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    write_file_atomic(path("explode.cfg"), cfg.serialize());
    REQUIRE(pcdet("gen-data --config " + path("scenes.cfg") + " --seeds 0-3 --out " + path("train")).code == 0);
    REQUIRE(pcdet("gen-data --config " + path("scenes.cfg") + " --seeds 10,11 --out " + path("val")).code == 0);
    REQUIRE(pcdet("train-teacher --data " + path("train") + " --val " + path("val") + " --config " +
                  path("pipeline.cfg") + " --out " + path("teacher"))
                .code == 0);
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("usage errors exit 1") {
  workspace();
  CHECK(pcdet("").code == 1);
  CHECK(pcdet("frobnicate").code == 1);
  CHECK(pcdet("gen-data --seeds 1").code == 1);
  CHECK(pcdet("eval --data " + path("val") + " --rp 12 --model x").code == 1);
  CHECK(pcdet("--help").code == 0);
  CHECK(pcdet("eval --data " + path("val")).code == 1);  // neither --model nor --predictions
}

TEST_CASE("validation errors exit 2 and name the problem") {
  workspace();
  auto r = pcdet("gen-data --config " + path("missing.cfg") + " --seeds 1 --out " + path("x"));
  CHECK(r.code == 2);
  CHECK(r.out.find("missing.cfg") != std::string::npos);
  r = pcdet("gen-data --config " + path("scenes.cfg") + " --seeds 5-2 --out " + path("x"));
  CHECK(r.code == 2);
  write_file_atomic(path("bad.cfg"), read_file(path("pipeline.cfg")) + "no_such_key = 1\n");
  r = pcdet("train-teacher --data " + path("train") + " --config " + path("bad.cfg") + " --out " + path("x"));
  CHECK(r.code == 2);
  CHECK(r.out.find("no_such_key") != std::string::npos);
  write_file_atomic(path("garbage.ckpt"), "not a checkpoint");
  r = pcdet("eval --model " + path("garbage.ckpt") + " --data " + path("val"));
  CHECK(r.code == 2);
}

TEST_CASE("gen-data is deterministic and records a manifest") {
  workspace();
  REQUIRE(pcdet("gen-data --config " + path("scenes.cfg") + " --seeds 0-3 --out " + path("train_again")).code == 0);
  const auto a = data::list_scenes(path("train"));
  const auto b = data::list_scenes(path("train_again"));
  REQUIRE(a.size() == 4);
  REQUIRE(b.size() == 4);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(read_file(a[i]) == read_file(b[i]));
  CHECK(fs::path(a[0]).filename() == "scene_000000.pcs");

  const auto man = nlohmann::json::parse(read_file(path("train/manifest.json")));
  CHECK(man.at("command") == "gen-data");
  CHECK(man.contains("config"));
  CHECK(man.contains("seed"));
  CHECK(man.contains("git_describe"));
  CHECK(man.contains("started"));
  const auto end = nlohmann::json::parse(read_file(path("train/manifest.end.json")));
  CHECK(end.contains("ended"));
  CHECK(end.at("outputs").size() == 4);
}

TEST_CASE("train-teacher writes a loadable checkpoint and metrics") {
  workspace();
  const auto ck = Checkpoint::load(path("teacher/teacher.ckpt"));
  CHECK(ck.meta.rfind("role = teacher", 0) == 0);
  const auto rows = lines(read_file(path("teacher/metrics.csv")));
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].rfind("epoch,lr,total", 0) == 0);
  CHECK(rows[1].rfind("1,", 0) == 0);
}

TEST_CASE("distill sweeps temperatures") {
  workspace();
  const auto r = pcdet("distill --teacher " + path("teacher/teacher.ckpt") + " --data " + path("train") + " --val " +
                       path("val") + " --config " + path("pipeline.cfg") + " --out " + path("sweep") + " --T 1,3");
  REQUIRE(r.code == 0);
  const auto rows = lines(read_file(path("sweep/temperature_sweep.csv")));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "temperature,ap11_car,ap11_cyclist,map11,ap40_car,ap40_cyclist,map40");
  CHECK(rows[1].rfind("1,", 0) == 0);
  CHECK(rows[2].rfind("3,", 0) == 0);
  for (const char* t : {"T_1", "T_3"}) {
    CHECK(fs::exists(kRoot / "sweep" / t / "student.ckpt"));
    CHECK(fs::exists(kRoot / "sweep" / t / "metrics.csv"));
  }
  const auto bad = pcdet("distill --teacher " + path("teacher/teacher.ckpt") + " --data " + path("train") +
                         " --config " + path("pipeline.cfg") + " --out " + path("sweep_bad") + " --T 0");
  CHECK(bad.code == 2);
}

TEST_CASE("eval from a model and from its predictions agree") {
  workspace();
  REQUIRE(pcdet("eval --model " + path("teacher/teacher.ckpt") + " --data " + path("val") + " --out " +
                path("ap_model.csv") + " --write-predictions " + path("preds.csv"))
              .code == 0);
  REQUIRE(pcdet("eval --predictions " + path("preds.csv") + " --data " + path("val") + " --out " +
                path("ap_preds.csv"))
              .code == 0);
  CHECK(read_file(path("ap_model.csv")) == read_file(path("ap_preds.csv")));
  const auto rows = lines(read_file(path("ap_model.csv")));
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == "class,iou,recall_positions,ap");

  write_file_atomic(path("bad_preds.csv"), "scene,class\n0,1\n");
  CHECK(pcdet("eval --predictions " + path("bad_preds.csv") + " --data " + path("val")).code == 2);
}

TEST_CASE("bench reports both roles") {
  workspace();
  REQUIRE(pcdet("bench --config " + path("pipeline.cfg") + " --scene-config " + path("scenes.cfg") +
                " --scenes 1 --out " + path("bench.csv"))
              .code == 0);
  const auto rows = lines(read_file(path("bench.csv")));
  REQUIRE(rows.size() == 3);
  CHECK(rows[1].rfind("teacher,", 0) == 0);
  CHECK(rows[2].rfind("student,", 0) == 0);
}

TEST_CASE("gradcheck command and its negative control") {
  workspace();
  const auto ok = pcdet("gradcheck --filter matmul");
  CHECK(ok.code == 0);
  CHECK(ok.out.find("matmul") != std::string::npos);
  const auto bad = pcdet("gradcheck --filter matmul --fault matmul");
  CHECK(bad.code == 2);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("a diverging run exits 3 and names the last good checkpoint") {
  workspace();
  const auto r = pcdet("train-teacher --data " + path("train") + " --config " + path("explode.cfg") + " --out " +
                       path("exploded"));
  CHECK(r.code == 3);
  CHECK(r.out.find("teacher.ckpt") != std::string::npos);
}
