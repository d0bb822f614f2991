#include "ovformer/config.hpp"

#include <fstream>

#include "ovformer/errors.hpp"

namespace ovf {

namespace {

std::string trim(const std::string& s) {
    size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

std::map<std::string, std::string> parse_config_file(const std::string& path,
                                                     const std::set<std::string>& allowed_keys) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw UsageError(path + ":" + std::to_string(line_no) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!allowed_keys.count(key))
            throw UsageError(path + ":" + std::to_string(line_no) + ": unknown config key '" + key + "'");
        if (kv.count(key))
            throw UsageError(path + ":" + std::to_string(line_no) + ": duplicate config key '" + key + "'");
        kv[key] = value;
    }
    return kv;
}

const std::map<std::string, std::string>& named_preset(const std::string& name) {
    static const std::map<std::string, std::map<std::string, std::string>> presets = {
        {"stage1",
         {{"max_seq_len", "512"}, {"lr", "1e-3"}, {"epochs", "40"}, {"nms_thresh", "0.75"}}},
        {"thumos-ft",
         {{"max_seq_len", "2304"}, {"lr", "1e-4"}, {"epochs", "13"}, {"nms_thresh", "0.5"}}},
        {"anet-ft",
         {{"max_seq_len", "192"}, {"lr", "1e-3"}, {"epochs", "15"}, {"nms_thresh", "0.7"}}},
    };
    auto it = presets.find(name);
    if (it == presets.end()) throw UsageError("unknown preset '" + name + "'");
    return it->second;
}

std::vector<std::string> preset_names() { return {"stage1", "thumos-ft", "anet-ft"}; }

}  // namespace ovf
