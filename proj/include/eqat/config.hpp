#pragma once

#include <charconv>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "eqat/data.hpp"
#include "eqat/error.hpp"

namespace eqat {

// key = value lines; '#' starts a comment.
class KeyValueConfig {
public:
    static KeyValueConfig parse(std::string_view text) {
        KeyValueConfig c;
        std::istringstream in{std::string(text)};
        std::string line;
        std::size_t lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            require(eq != std::string::npos, ErrorKind::format, "config line " + std::to_string(lineno) + ": expected key = value");
            const std::string key = trim(t.substr(0, eq));
            require(!key.empty(), ErrorKind::format, "config line " + std::to_string(lineno) + ": empty key");
            c.values_[key] = trim(t.substr(eq + 1));
        }
        return c;
    }

    static KeyValueConfig load(const std::string& path) { return parse(detail::read_file(path)); }

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }
    const std::map<std::string, std::string>& values() const noexcept { return values_; }

    std::string get(const std::string& key, const std::string& fallback) const {
        auto it = values_.find(key);
        return it == values_.end() ? fallback : it->second;
    }

    template <class T>
    T get(const std::string& key, T fallback) const {
        auto it = values_.find(key);
        if (it == values_.end()) return fallback;
        T v{};
        const auto& s = it->second;
        const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
        require(r.ec == std::errc{} && r.ptr == s.data() + s.size(), ErrorKind::format,
                "config key '" + key + "': cannot parse '" + s + "'");
        return v;
    }

private:
    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r");
        if (b == std::string::npos) return {};
        return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
    }

    std::map<std::string, std::string> values_;
};

}  // namespace eqat
