#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace ovf {

// key=value configuration files: one key per line, '#' comments, unknown
// keys are hard errors against the allowed set.
std::map<std::string, std::string> parse_config_file(const std::string& path,
                                                     const std::set<std::string>& allowed_keys);

// Paper-derived hyperparameter presets, applied before file/flag overrides.
//   stage1     (pretraining):      max_seq_len 512, lr 1e-3, 40 epochs, nms_thresh 0.75
//   thumos-ft  (finetune preset):  max_seq_len 2304, lr 1e-4, 13 epochs, nms_thresh 0.5
//   anet-ft    (finetune preset):  max_seq_len 192, lr 1e-3, 15 epochs, nms_thresh 0.7
const std::map<std::string, std::string>& named_preset(const std::string& name);
std::vector<std::string> preset_names();

}  // namespace ovf
