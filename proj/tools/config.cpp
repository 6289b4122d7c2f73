#include <cmath>
#include <fstream>
#include <sstream>

#define TOML_EXCEPTIONS 1
#include <toml.hpp>

#include "lab.hpp"
#include "npad/errors.hpp"
#include "npad/hash.hpp"

namespace npad::lab {

namespace {

nlohmann::json node_to_json(const toml::node& n, const std::string& where) {
    if (const auto* t = n.as_table()) {
        nlohmann::json j = nlohmann::json::object();
        for (auto&& [k, v] : *t) {
            const std::string key(k.str());
            j[key] = node_to_json(v, where.empty() ? key : where + "." + key);
        }
        return j;
    }
    if (const auto* a = n.as_array()) {
        nlohmann::json j = nlohmann::json::array();
        for (auto&& v : *a) j.push_back(node_to_json(v, where));
        return j;
    }
    if (const auto* s = n.as_string()) return s->get();
    if (const auto* i = n.as_integer()) return i->get();
    if (const auto* f = n.as_floating_point()) return f->get();
    if (const auto* b = n.as_boolean()) return b->get();
    throw ConfigError("'" + where + "': dates and times are not valid configuration values");
}

std::vector<std::string> split_dotted(const std::string& key) {
    std::vector<std::string> parts;
    std::string cur;
    for (char c : key) {
        if (c == '.') {
            parts.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    parts.push_back(cur);
    for (const auto& p : parts) {
        if (p.empty()) throw ConfigError("malformed configuration key '" + key + "'");
    }
    return parts;
}

}  // namespace

nlohmann::json read_config_file(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
    if (path.extension() == ".json") {
        try {
            return nlohmann::json::parse(read_text(path));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(path.string() + ": " + e.what());
        }
    }
    try {
        return node_to_json(toml::parse_file(path.string()), "");
    } catch (const toml::parse_error& e) {
        std::ostringstream msg;
        msg << path.string() << ':' << e.source().begin.line << ':' << e.source().begin.column << ": "
            << e.description();
        throw ParseError(msg.str());
    }
}

void set_dotted(nlohmann::json& j, const std::string& key, nlohmann::json value) {
    const auto parts = split_dotted(key);
    nlohmann::json* cur = &j;
    for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        nlohmann::json& next = (*cur)[parts[i]];
        if (next.is_null()) next = nlohmann::json::object();
        if (!next.is_object()) throw ConfigError("'" + key + "': '" + parts[i] + "' is not a table");
        cur = &next;
    }
    (*cur)[parts.back()] = std::move(value);
}

void set_dotted(nlohmann::json& j, const std::string& key, const std::string& raw) {
    nlohmann::json value = raw;
    try {
        const toml::table t = toml::parse("v = " + raw);
        value = node_to_json(*t.get("v"), key);
    } catch (const toml::parse_error&) {
        // Bare words such as npad1 are taken as strings.
    }
    set_dotted(j, key, std::move(value));
}

RunConfig resolve_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& sets,
                         const std::vector<std::pair<std::string, nlohmann::json>>& flags) {
    nlohmann::json j = file ? read_config_file(*file) : nlohmann::json::object();
    if (!j.is_object()) throw ConfigError("configuration must be a table");
    for (const auto& s : sets) {
        const auto eq = s.find('=');
        if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + s + "'");
        set_dotted(j, s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& [k, v] : flags) set_dotted(j, k, v);

    nlohmann::json data = nlohmann::json::object();
    if (j.contains("data")) {
        data = j.at("data");
        j.erase("data");
        if (!data.is_object()) throw ConfigError("'data' must be a table");
    }
    RunConfig r;
    try {
        r.experiment = ExperimentConfig::from_json(j);
        r.data = DatasetSpec::from_json(data);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("configuration: ") + e.what());
    }
    r.resolved = {{"experiment", r.experiment.to_json()}, {"data", r.data.to_json()}};
    r.hash = fnv1a_hex(r.resolved.dump());
    return r;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
    auto number = [&](const std::string& t) -> std::uint64_t {
        if (t.empty() || t.find_first_not_of("0123456789") != std::string::npos || t.size() > 19) {
            throw ConfigError("malformed seed list '" + s + "'");
        }
        return std::stoull(t);
    };
    std::vector<std::uint64_t> out;
    std::stringstream in(s);
    std::string item;
    while (std::getline(in, item, ',')) {
        const auto dash = item.find('-');
        if (dash == std::string::npos) {
            out.push_back(number(item));
            continue;
        }
        const std::uint64_t lo = number(item.substr(0, dash)), hi = number(item.substr(dash + 1));
        if (hi < lo || hi - lo > 10000) throw ConfigError("malformed seed range '" + item + "'");
        for (std::uint64_t v = lo; v <= hi; ++v) out.push_back(v);
    }
    if (out.empty()) throw ConfigError("empty seed list");
    return out;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path.string());
    out << text;
}

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot read " + path.string());
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericError*>(&e) || dynamic_cast<const StateError*>(&e)) return 3;
    if (dynamic_cast<const Error*>(&e) || dynamic_cast<const nlohmann::json::exception*>(&e)) return 2;
    if (dynamic_cast<const std::filesystem::filesystem_error*>(&e)) return 2;
    return 3;
}

}  // namespace npad::lab
