#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace mgic {

// Dtype-erased structural description of a built network, produced by
// Module::describe(). The cost model walks this tree instead of the live
// modules so counting stays independent of the scalar type.
struct NetDesc {
    std::string kind;
    std::string name;
    std::map<std::string, std::int64_t> attr;
    std::vector<NetDesc> children;

    std::int64_t get(const std::string& key) const { return attr.at(key); }
    bool has(const std::string& key) const { return attr.count(key) != 0; }
};

}  // namespace mgic
