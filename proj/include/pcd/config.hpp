#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace pcd {

/// Flat `key = value` text. Lines starting with '#' and blank lines are ignored.
/// Arrays are comma lists; nested arrays separate groups with ';'.
class KeyValueFile {
 public:
  static KeyValueFile parse(std::string_view text);
  static KeyValueFile load(const std::string& path);

  bool contains(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& raw(const std::string& key) const;
  const std::map<std::string, std::string>& entries() const { return values_; }
  void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

  int get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<double> get_doubles(const std::string& key) const;
  std::vector<int> get_ints(const std::string& key) const;
  std::vector<std::vector<int>> get_int_groups(const std::string& key) const;
  std::vector<std::string> get_strings(const std::string& key) const;

 private:
  std::map<std::string, std::string> values_;
};

// Locale-independent shortest round-trip formatting.
std::string format_double(double v);
std::string format_doubles(const std::vector<double>& v);
std::string format_ints(const std::vector<int>& v);
std::string format_int_groups(const std::vector<std::vector<int>>& v);
std::string format_strings(const std::vector<std::string>& v);

double parse_double(std::string_view s);
long long parse_int(std::string_view s);

/// Every knob of the detection pipeline. Defaults reproduce the full-scale
/// KITTI configuration; configs/toy.cfg holds the desk-scale benchmark values.
struct PipelineConfig {
  // Repository initialization.
  int n_keypoints = 4096;
  std::vector<double> repo_msg_radii{0.2, 0.4, 0.8};
  std::vector<int> repo_msg_ks{16, 16, 32};
  std::vector<std::vector<int>> repo_msg_channels{{16, 16, 32}, {16, 16, 32}, {32, 32, 64}};
  int repo_init_dim = 64;
  std::array<double, 3> voxel_size{0.4, 0.4, 0.4};
  int fg_hidden = 64;

  // Partial knowledge.
  int n_partial = 512;
  double sfps_gamma = 1.0;
  double partial_radius = 1.6;
  int partial_k = 32;
  std::vector<int> partial_mlp{128, 256, 512};
  std::vector<double> teacher_partial_radii{0.4, 0.8, 1.6};
  std::vector<int> teacher_partial_ks{16, 16, 32};
  std::vector<std::vector<int>> teacher_partial_mlps{{64, 128, 256}, {64, 128, 256}, {128, 256, 512}};

  // Repository update.
  std::vector<int> student_ed_channels{64, 64, 128, 64, 64};
  std::vector<int> teacher_ed_channels{64, 128, 256, 128, 64};
  int repo_feature_dim = 128;

  // Object level.
  std::vector<double> obj_radii{0.8, 1.6, 3.2};
  int obj_k_student = 16;
  int obj_k_teacher = 32;
  std::vector<std::vector<int>> obj_mlps{{64, 64, 128}, {64, 64, 128}, {64, 64, 128}};
  int stats_dim = 256;
  double stats_momentum = 0.99;
  int cls_hidden = 128;
  int loc_hidden = 128;
  std::vector<std::string> classes{"car", "cyclist"};

  // Losses.
  double temperature = 3.0;
  double lambda_soft = 0.7;
  double lambda_hard = 0.3;
  double alpha_t = 0.25;
  double gamma = 2.0;
  double lambda_ind = 1.0;
  double lambda_corner = 1.0;
  std::string soft_loc_iou = "cwiou";
  std::string hard_loc_iou = "iou";

  // Optimization.
  double lr = 0.01;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 100;
  int batch_size = 16;
  bool augment = true;

  // Inference and evaluation.
  double score_threshold = 0.3;
  double nms_iou = 0.1;
  double eval_iou = 0.5;

  std::uint64_t seed = 0;

  int n_classes() const { return static_cast<int>(classes.size()); }

  /// Throws ConfigError naming the offending key.
  void validate() const;

  std::string serialize() const;
  /// Missing keys keep their defaults; unknown keys are an error.
  static PipelineConfig from_kv(const KeyValueFile& kv);
  static PipelineConfig parse(std::string_view text) { return from_kv(KeyValueFile::parse(text)); }
  static PipelineConfig load(const std::string& path) { return from_kv(KeyValueFile::load(path)); }

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

}  // namespace pcd
