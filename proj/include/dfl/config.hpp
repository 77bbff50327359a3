#pragma once

#include <charconv>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dfl/common.hpp"

namespace dfl {

// ---------------------------------------------------------------------------
// Plain-text "key = value" configs. One entry per line; '#' starts a
// comment; whitespace around keys and values is trimmed. Insertion order is
// preserved so that echoed configs are stable byte-for-byte.
// ---------------------------------------------------------------------------

class KeyValueConfig {
public:
    KeyValueConfig() = default;

    static KeyValueConfig parse_text(const std::string& text, const std::string& origin = "<string>") {
        KeyValueConfig cfg;
        std::istringstream in(text);
        std::string line;
        int lineno = 0;
        while (std::getline(in, line)) {
            ++lineno;
            const auto hash = line.find('#');
            if (hash != std::string::npos) line.erase(hash);
            const std::string t = trim(line);
            if (t.empty()) continue;
            const auto eq = t.find('=');
            if (eq == std::string::npos)
                throw ConfigError(strf("%s:%d: expected 'key = value', got \"%s\"",
                                       origin.c_str(), lineno, t.c_str()));
            const std::string key = trim(t.substr(0, eq));
            const std::string val = trim(t.substr(eq + 1));
            if (key.empty())
                throw ConfigError(strf("%s:%d: empty key", origin.c_str(), lineno));
            cfg.set(key, val);
        }
        return cfg;
    }

    static KeyValueConfig load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot open config file: " + path);
        std::ostringstream ss;
        ss << in.rdbuf();
        return parse_text(ss.str(), path);
    }

    bool has(const std::string& key) const { return index_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = index_.find(key);
        if (it == index_.end()) {
            index_[key] = entries_.size();
            entries_.push_back({key, value});
        } else {
            entries_[it->second].second = value;
        }
    }
    void set(const std::string& key, double value) { set(key, fmt_double(value)); }
    void set(const std::string& key, int value) { set(key, std::to_string(value)); }
    void set(const std::string& key, long long value) { set(key, std::to_string(value)); }

    std::string get_str(const std::string& key) const {
        auto it = index_.find(key);
        if (it == index_.end()) throw ConfigError("missing config key: " + key);
        return entries_[it->second].second;
    }
    std::string get_str(const std::string& key, const std::string& dflt) const {
        return has(key) ? get_str(key) : dflt;
    }

    double get_double(const std::string& key) const { return to_double(key, get_str(key)); }
    double get_double(const std::string& key, double dflt) const {
        return has(key) ? get_double(key) : dflt;
    }

    int get_int(const std::string& key) const {
        const double d = get_double(key);
        const int i = static_cast<int>(d);
        if (static_cast<double>(i) != d)
            throw ConfigError(strf("config key %s: expected integer, got %s", key.c_str(),
                                   get_str(key).c_str()));
        return i;
    }
    int get_int(const std::string& key, int dflt) const { return has(key) ? get_int(key) : dflt; }

    bool get_bool(const std::string& key) const {
        const std::string s = get_str(key);
        if (s == "true" || s == "1" || s == "on" || s == "yes") return true;
        if (s == "false" || s == "0" || s == "off" || s == "no") return false;
        throw ConfigError(strf("config key %s: expected boolean, got %s", key.c_str(), s.c_str()));
    }
    bool get_bool(const std::string& key, bool dflt) const {
        return has(key) ? get_bool(key) : dflt;
    }

    std::vector<double> get_doubles(const std::string& key) const {
        std::vector<double> out;
        std::string s = get_str(key);
        for (char& ch : s)
            if (ch == ',') ch = ' ';
        std::istringstream in(s);
        std::string tok;
        while (in >> tok) out.push_back(to_double(key, tok));
        return out;
    }

    /// Serialized form, one "key = value" per line in insertion order.
    std::string text() const {
        std::ostringstream out;
        for (const auto& [k, v] : entries_) out << k << " = " << v << "\n";
        return out.str();
    }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw DataError("cannot write config file: " + path);
        out << text();
    }

    const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

private:
    static std::string trim(const std::string& s) {
        size_t b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return "";
        size_t e = s.find_last_not_of(" \t\r\n");
        return s.substr(b, e - b + 1);
    }
    static std::string fmt_double(double v) {
        // Shortest representation that round-trips exactly.
        char buf[64];
        const auto res = std::to_chars(buf, buf + sizeof(buf), v);
        return std::string(buf, res.ptr);
    }
    double to_double(const std::string& key, const std::string& s) const {
        try {
            size_t pos = 0;
            const double d = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument(s);
            return d;
        } catch (const std::exception&) {
            throw ConfigError(strf("config key %s: expected number, got %s", key.c_str(),
                                   s.c_str()));
        }
    }

    std::vector<std::pair<std::string, std::string>> entries_;
    std::map<std::string, size_t> index_;
};

}  // namespace dfl
