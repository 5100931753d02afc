#include "pcd/config.hpp"

#include <charconv>
#include <fstream>
#include <set>
#include <sstream>

#include "pcd/core.hpp"

namespace pcd {
namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

}  // namespace

double parse_double(std::string_view s) {
  s = trim(s);
  double v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not a number: '" + std::string(s) + "'");
  }
  return v;
}

long long parse_int(std::string_view s) {
  s = trim(s);
  long long v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("not an integer: '" + std::string(s) + "'");
  }
  return v;
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string format_doubles(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
  return out;
}

std::string format_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string format_int_groups(const std::vector<std::vector<int>>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? ";" : "") + format_ints(v[i]);
  return out;
}

std::string format_strings(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}

KeyValueFile KeyValueFile::parse(std::string_view text) {
  KeyValueFile kv;
  int line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key(trim(line.substr(0, eq)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (kv.contains(key)) throw ConfigError("duplicate key '" + key + "'");
    kv.values_[key] = std::string(trim(line.substr(eq + 1)));
  }
  return kv;
}

KeyValueFile KeyValueFile::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

const std::string& KeyValueFile::raw(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
  return it->second;
}

int KeyValueFile::get_int(const std::string& key) const {
  try {
    return static_cast<int>(parse_int(raw(key)));
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

std::uint64_t KeyValueFile::get_u64(const std::string& key) const {
  const auto& s = raw(key);
  std::uint64_t v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
    throw ConfigError("key '" + key + "': not an unsigned integer: '" + s + "'");
  }
  return v;
}

double KeyValueFile::get_double(const std::string& key) const {
  try {
    return parse_double(raw(key));
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
}

bool KeyValueFile::get_bool(const std::string& key) const {
  const auto& s = raw(key);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("key '" + key + "': not a boolean: '" + s + "'");
}

std::vector<double> KeyValueFile::get_doubles(const std::string& key) const {
  std::vector<double> out;
  try {
    for (auto part : split(raw(key), ',')) out.push_back(parse_double(part));
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
  return out;
}

std::vector<int> KeyValueFile::get_ints(const std::string& key) const {
  std::vector<int> out;
  try {
    for (auto part : split(raw(key), ',')) out.push_back(static_cast<int>(parse_int(part)));
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
  return out;
}

std::vector<std::vector<int>> KeyValueFile::get_int_groups(const std::string& key) const {
  std::vector<std::vector<int>> out;
  try {
    for (auto group : split(raw(key), ';')) {
      auto& row = out.emplace_back();
      for (auto part : split(group, ',')) row.push_back(static_cast<int>(parse_int(part)));
    }
  } catch (const ConfigError& e) {
    throw ConfigError("key '" + key + "': " + e.what());
  }
  return out;
}

std::vector<std::string> KeyValueFile::get_strings(const std::string& key) const {
  std::vector<std::string> out;
  for (auto part : split(raw(key), ',')) {
    if (part.empty()) throw ConfigError("key '" + key + "': empty list entry");
    out.emplace_back(part);
  }
  return out;
}

namespace {

// Single source of truth for key names and their order in serialized files.
template <class Cfg, class Visitor>
void visit_fields(Cfg& c, Visitor&& v) {
  v("n_keypoints", c.n_keypoints);
  v("repo_msg_radii", c.repo_msg_radii);
  v("repo_msg_ks", c.repo_msg_ks);
  v("repo_msg_channels", c.repo_msg_channels);
  v("repo_init_dim", c.repo_init_dim);
  v("voxel_size", c.voxel_size);
  v("fg_hidden", c.fg_hidden);
  v("n_partial", c.n_partial);
  v("sfps_gamma", c.sfps_gamma);
  v("partial_radius", c.partial_radius);
  v("partial_k", c.partial_k);
  v("partial_mlp", c.partial_mlp);
  v("teacher_partial_radii", c.teacher_partial_radii);
  v("teacher_partial_ks", c.teacher_partial_ks);
  v("teacher_partial_mlps", c.teacher_partial_mlps);
  v("student_ed_channels", c.student_ed_channels);
  v("teacher_ed_channels", c.teacher_ed_channels);
  v("repo_feature_dim", c.repo_feature_dim);
  v("obj_radii", c.obj_radii);
  v("obj_k_student", c.obj_k_student);
  v("obj_k_teacher", c.obj_k_teacher);
  v("obj_mlps", c.obj_mlps);
  v("stats_dim", c.stats_dim);
  v("stats_momentum", c.stats_momentum);
  v("cls_hidden", c.cls_hidden);
  v("loc_hidden", c.loc_hidden);
  v("classes", c.classes);
  v("temperature", c.temperature);
  v("lambda_soft", c.lambda_soft);
  v("lambda_hard", c.lambda_hard);
  v("alpha_t", c.alpha_t);
  v("gamma", c.gamma);
  v("lambda_ind", c.lambda_ind);
  v("lambda_corner", c.lambda_corner);
  v("soft_loc_iou", c.soft_loc_iou);
  v("hard_loc_iou", c.hard_loc_iou);
  v("lr", c.lr);
  v("adam_beta1", c.adam_beta1);
  v("adam_beta2", c.adam_beta2);
  v("adam_eps", c.adam_eps);
  v("epochs", c.epochs);
  v("batch_size", c.batch_size);
  v("augment", c.augment);
  v("score_threshold", c.score_threshold);
  v("nms_iou", c.nms_iou);
  v("eval_iou", c.eval_iou);
  v("seed", c.seed);
}

struct Writer {
  std::ostringstream& out;
  void emit(const char* k, const std::string& v) { out << k << " = " << v << '\n'; }
  void operator()(const char* k, const int& v) { emit(k, std::to_string(v)); }
  void operator()(const char* k, const std::uint64_t& v) { emit(k, std::to_string(v)); }
  void operator()(const char* k, const bool& v) { emit(k, v ? "true" : "false"); }
  void operator()(const char* k, const double& v) { emit(k, format_double(v)); }
  void operator()(const char* k, const std::string& v) { emit(k, v); }
  void operator()(const char* k, const std::vector<double>& v) { emit(k, format_doubles(v)); }
  void operator()(const char* k, const std::vector<int>& v) { emit(k, format_ints(v)); }
  void operator()(const char* k, const std::vector<std::vector<int>>& v) { emit(k, format_int_groups(v)); }
  void operator()(const char* k, const std::vector<std::string>& v) { emit(k, format_strings(v)); }
  void operator()(const char* k, const std::array<double, 3>& v) {
    emit(k, format_doubles({v[0], v[1], v[2]}));
  }
};

struct Reader {
  const KeyValueFile& kv;
  std::set<std::string>& seen;
  bool take(const char* k) {
    if (!kv.contains(k)) return false;
    seen.insert(k);
    return true;
  }
  void operator()(const char* k, int& v) { if (take(k)) v = kv.get_int(k); }
  void operator()(const char* k, std::uint64_t& v) { if (take(k)) v = kv.get_u64(k); }
  void operator()(const char* k, bool& v) { if (take(k)) v = kv.get_bool(k); }
  void operator()(const char* k, double& v) { if (take(k)) v = kv.get_double(k); }
  void operator()(const char* k, std::string& v) { if (take(k)) v = kv.raw(k); }
  void operator()(const char* k, std::vector<double>& v) { if (take(k)) v = kv.get_doubles(k); }
  void operator()(const char* k, std::vector<int>& v) { if (take(k)) v = kv.get_ints(k); }
  void operator()(const char* k, std::vector<std::vector<int>>& v) { if (take(k)) v = kv.get_int_groups(k); }
  void operator()(const char* k, std::vector<std::string>& v) { if (take(k)) v = kv.get_strings(k); }
  void operator()(const char* k, std::array<double, 3>& v) {
    if (!take(k)) return;
    const auto d = kv.get_doubles(k);
    if (d.size() != 3) throw ConfigError(std::string("key '") + k + "': expected 3 values");
    v = {d[0], d[1], d[2]};
  }
};

void require(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "': " + what);
}

void require_counts(const std::vector<int>& v, const std::string& key) {
  require(!v.empty(), key, "must not be empty");
  for (int x : v) require(x >= 1, key, "all counts must be >= 1");
}

void require_increasing(const std::vector<double>& v, const std::string& key) {
  require(!v.empty(), key, "must not be empty");
  for (std::size_t i = 0; i < v.size(); ++i) {
    require(v[i] > 0, key, "radii must be positive");
    if (i) require(v[i] > v[i - 1], key, "radii must be strictly increasing");
  }
}

}  // namespace

void PipelineConfig::validate() const {
  require(n_keypoints >= 1, "n_keypoints", "must be >= 1");
  require_increasing(repo_msg_radii, "repo_msg_radii");
  require_counts(repo_msg_ks, "repo_msg_ks");
  require(repo_msg_ks.size() == repo_msg_radii.size(), "repo_msg_ks", "length must match repo_msg_radii");
  require(repo_msg_channels.size() == repo_msg_radii.size(), "repo_msg_channels",
          "group count must match repo_msg_radii");
  for (const auto& g : repo_msg_channels) require_counts(g, "repo_msg_channels");
  require(repo_init_dim >= 1, "repo_init_dim", "must be >= 1");
  for (double v : voxel_size) require(v > 0, "voxel_size", "must be positive");
  require(fg_hidden >= 1, "fg_hidden", "must be >= 1");
  require(n_partial >= 1, "n_partial", "must be >= 1");
  require(sfps_gamma >= 0, "sfps_gamma", "must be >= 0");
  require(partial_radius > 0, "partial_radius", "must be positive");
  require(partial_k >= 1, "partial_k", "must be >= 1");
  require_counts(partial_mlp, "partial_mlp");
  require_increasing(teacher_partial_radii, "teacher_partial_radii");
  require(teacher_partial_radii.size() >= 2, "teacher_partial_radii", "teacher needs at least 2 scales");
  require_counts(teacher_partial_ks, "teacher_partial_ks");
  require(teacher_partial_ks.size() == teacher_partial_radii.size(), "teacher_partial_ks",
          "length must match teacher_partial_radii");
  require(teacher_partial_mlps.size() == teacher_partial_radii.size(), "teacher_partial_mlps",
          "group count must match teacher_partial_radii");
  for (const auto& g : teacher_partial_mlps) require_counts(g, "teacher_partial_mlps");
  for (const auto* ed : {&student_ed_channels, &teacher_ed_channels}) {
    const std::string key = ed == &student_ed_channels ? "student_ed_channels" : "teacher_ed_channels";
    require_counts(*ed, key);
    require(ed->size() == 5, key, "expected 5 entries (stem, down, bottleneck, up, up)");
    require((*ed)[1] == (*ed)[3] && (*ed)[0] == (*ed)[4], key, "shortcut stages need equal widths");
  }
  require(repo_feature_dim >= 1, "repo_feature_dim", "must be >= 1");
  require_increasing(obj_radii, "obj_radii");
  require(obj_k_student >= 1, "obj_k_student", "must be >= 1");
  require(obj_k_teacher >= 1, "obj_k_teacher", "must be >= 1");
  require(obj_mlps.size() == obj_radii.size(), "obj_mlps", "group count must match obj_radii");
  for (const auto& g : obj_mlps) require_counts(g, "obj_mlps");
  require(stats_dim >= 1, "stats_dim", "must be >= 1");
  require(stats_momentum >= 0 && stats_momentum <= 1, "stats_momentum", "must be in [0, 1]");
  require(cls_hidden >= 1, "cls_hidden", "must be >= 1");
  require(loc_hidden >= 1, "loc_hidden", "must be >= 1");
  require(!classes.empty(), "classes", "must not be empty");
  require(temperature > 0, "temperature", "must be positive");
  require(lambda_soft >= 0, "lambda_soft", "must be >= 0");
  require(lambda_hard >= 0, "lambda_hard", "must be >= 0");
  require(alpha_t > 0 && alpha_t < 1, "alpha_t", "must be in (0, 1)");
  require(gamma >= 0 && gamma == static_cast<int>(gamma) && static_cast<int>(gamma) % 2 == 0, "gamma",
          "must be an even integer");
  require(lambda_ind >= 0, "lambda_ind", "must be >= 0");
  require(lambda_corner >= 0, "lambda_corner", "must be >= 0");
  for (const auto* s : {&soft_loc_iou, &hard_loc_iou}) {
    require(*s == "iou" || *s == "cwiou", s == &soft_loc_iou ? "soft_loc_iou" : "hard_loc_iou",
            "must be 'iou' or 'cwiou'");
  }
  require(lr > 0, "lr", "must be positive");
  require(adam_beta1 >= 0 && adam_beta1 < 1, "adam_beta1", "must be in [0, 1)");
  require(adam_beta2 >= 0 && adam_beta2 < 1, "adam_beta2", "must be in [0, 1)");
  require(adam_eps > 0, "adam_eps", "must be positive");
  require(epochs >= 1, "epochs", "must be >= 1");
  require(batch_size >= 1, "batch_size", "must be >= 1");
  require(score_threshold >= 0 && score_threshold <= 1, "score_threshold", "must be in [0, 1]");
  require(nms_iou >= 0 && nms_iou <= 1, "nms_iou", "must be in [0, 1]");
  require(eval_iou > 0 && eval_iou <= 1, "eval_iou", "must be in (0, 1]");
}

std::string PipelineConfig::serialize() const {
  std::ostringstream out;
  Writer w{out};
  visit_fields(*this, w);
  return out.str();
}

PipelineConfig PipelineConfig::from_kv(const KeyValueFile& kv) {
  PipelineConfig c;
  std::set<std::string> seen;
  Reader r{kv, seen};
  visit_fields(c, r);
  for (const auto& [key, value] : kv.entries()) {
    if (!seen.count(key)) throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

}  // namespace pcd
