#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "steerlab/common.hpp"

namespace steerlab {

// Line-oriented run configuration: `section.key = value`, '#' comments.
// Every key is registered with a default; unknown keys are config errors.
// Keys whose default is "auto" are seeds derived from run.seed, so a single
// master seed pins the whole pipeline while any stage stays overridable.
class Config {
public:
    struct KeySpec {
        const char* key;
        const char* def;
        const char* doc;
    };

    static const std::vector<KeySpec>& schema();
    static Config defaults();

    void load_file(const std::string& path);
    void apply_line(const std::string& line); // one "k = v" line
    void set(const std::string& key, const std::string& value);

    bool known(const std::string& key) const;
    const std::string& get(const std::string& key) const;
    int get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    uint64_t get_u64(const std::string& key) const;
    bool get_bool(const std::string& key) const;
    std::vector<uint64_t> get_u64_list(const std::string& key) const;
    std::vector<std::string> get_str_list(const std::string& key) const;

    // replaces every "auto" seed with a value derived from run.seed
    void resolve();

    std::map<std::string, std::string> values() const { return values_; }
    uint64_t content_hash() const;
    std::string dump() const; // canonical text form, one key per line

private:
    std::map<std::string, std::string> values_;
};

} // namespace steerlab
