#pragma once

// Event/entity definition schemas and the runtime instance types they govern.
//
// Wire format (JSON):
//   {"tenant", "version",
//    "events":   [{"EventType","Description","Properties":[{"PropertyName","PropertyType","Description"}],
//                  "InstanceWeightField"?}],
//    "entities": [{"EntityType","Description","Properties":[{"PropertyName","PropertyType","Description",
//                  "AggregateExpression":{"EventType","PropertyName","Op","GroupBy"?,"Filters"?}}]}]}

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "membase/error.hpp"
#include "membase/text.hpp"
#include "membase/value.hpp"

namespace membase {

enum class PropertyType { string, number, integer, boolean, timestamp };

enum class OperatorKind { SUM, COUNT, MAX, AVG, LLM_MERGE, TIME_COMPRESS };

inline const char* to_string(PropertyType t) {
    switch (t) {
        case PropertyType::string: return "string";
        case PropertyType::number: return "number";
        case PropertyType::integer: return "integer";
        case PropertyType::boolean: return "boolean";
        case PropertyType::timestamp: return "timestamp";
    }
    return "string";
}

inline const char* to_string(OperatorKind op) {
    switch (op) {
        case OperatorKind::SUM: return "SUM";
        case OperatorKind::COUNT: return "COUNT";
        case OperatorKind::MAX: return "MAX";
        case OperatorKind::AVG: return "AVG";
        case OperatorKind::LLM_MERGE: return "LLM_MERGE";
        case OperatorKind::TIME_COMPRESS: return "TIME_COMPRESS";
    }
    return "COUNT";
}

inline std::optional<PropertyType> property_type_from_string(std::string_view s) {
    if (s == "string") return PropertyType::string;
    if (s == "number") return PropertyType::number;
    if (s == "integer") return PropertyType::integer;
    if (s == "boolean") return PropertyType::boolean;
    if (s == "timestamp") return PropertyType::timestamp;
    return std::nullopt;
}

inline std::optional<OperatorKind> operator_from_string(std::string_view s) {
    if (s == "SUM") return OperatorKind::SUM;
    if (s == "COUNT") return OperatorKind::COUNT;
    if (s == "MAX") return OperatorKind::MAX;
    if (s == "AVG") return OperatorKind::AVG;
    if (s == "LLM_MERGE") return OperatorKind::LLM_MERGE;
    if (s == "TIME_COMPRESS") return OperatorKind::TIME_COMPRESS;
    return std::nullopt;
}

inline bool is_numeric_type(PropertyType t) {
    return t == PropertyType::number || t == PropertyType::integer;
}

inline bool is_statistical(OperatorKind op) {
    return op == OperatorKind::SUM || op == OperatorKind::COUNT || op == OperatorKind::MAX ||
           op == OperatorKind::AVG;
}

struct PropertyDef {
    std::string name;
    PropertyType type = PropertyType::string;
    std::string description;

    bool operator==(const PropertyDef&) const = default;
};

struct EventTypeDef {
    std::string event_type;
    std::string description;
    std::vector<PropertyDef> properties;
    std::optional<std::string> instance_weight_field;

    const PropertyDef* find(std::string_view name) const {
        for (const auto& p : properties)
            if (p.name == name) return &p;
        return nullptr;
    }

    bool operator==(const EventTypeDef&) const = default;
};

// WHERE clause of an aggregate binding: half-open time window [from, to) on the
// event timestamp plus property equality predicates.
struct FilterSpec {
    std::optional<EpochMs> from;
    std::optional<EpochMs> to;
    std::map<std::string, Value> equals;

    bool empty() const { return !from && !to && equals.empty(); }
    bool operator==(const FilterSpec&) const = default;
};

struct AggregateExpression {
    std::string source_event_type;
    std::string source_property;
    OperatorKind op = OperatorKind::COUNT;
    std::vector<std::string> group_by{"user"};
    FilterSpec filters;

    bool operator==(const AggregateExpression&) const = default;
};

struct EntityPropertyDef {
    PropertyDef def;
    AggregateExpression aggregate;

    bool operator==(const EntityPropertyDef&) const = default;
};

struct EntityTypeDef {
    std::string entity_type;
    std::string description;
    std::vector<EntityPropertyDef> properties;

    const EntityPropertyDef* find(std::string_view name) const {
        for (const auto& p : properties)
            if (p.def.name == name) return &p;
        return nullptr;
    }

    bool operator==(const EntityTypeDef&) const = default;
};

struct MemorySchema {
    std::string tenant = "default";
    std::int64_t version = 1;
    std::vector<EventTypeDef> events;
    std::vector<EntityTypeDef> entities;

    const EventTypeDef* find_event(std::string_view name) const {
        for (const auto& e : events)
            if (e.event_type == name) return &e;
        return nullptr;
    }
    const EntityTypeDef* find_entity(std::string_view name) const {
        for (const auto& e : entities)
            if (e.entity_type == name) return &e;
        return nullptr;
    }

    bool operator==(const MemorySchema&) const = default;
};

struct EventInstance {
    std::string id;
    std::string event_type;
    EpochMs timestamp = 0;
    PropertyMap properties;
    std::string source_session;
    std::string user;
    std::optional<std::string> topic;
    std::optional<EpochMs> ttl_deadline;
    std::int64_t schema_version = 0;

    bool operator==(const EventInstance&) const = default;
};

struct Accumulator {
    double sum = 0.0;
    std::int64_t count = 0;

    bool operator==(const Accumulator&) const = default;
};

struct EntityInstance {
    std::string id;
    std::string entity_type;
    std::string group_key;
    PropertyMap properties;
    std::map<std::string, Accumulator> accumulators;
    std::int64_t version = 0;
    EpochMs updated_at = 0;

    bool operator==(const EntityInstance&) const = default;
};

inline std::string entity_id(std::string_view entity_type, std::string_view group_key) {
    return "ent:" + std::string(entity_type) + ":" + std::string(group_key);
}

// ---------------------------------------------------------------------------
// Parsing and canonical serialization

namespace detail {

inline void reject_unknown_keys(const Json& obj, std::initializer_list<std::string_view> allowed,
                                const std::string& path) {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(allowed.begin(), allowed.end(), it.key()) == allowed.end()) {
            throw Error(ErrorCode::unknown_key, "unknown key '" + it.key() + "'", path + "." + it.key());
        }
    }
}

inline const Json& require(const Json& obj, const char* key, const std::string& path) {
    auto it = obj.find(key);
    if (it == obj.end()) {
        throw Error(ErrorCode::syntax, std::string("missing key '") + key + "'", path + "." + key);
    }
    return *it;
}

inline std::string require_string(const Json& obj, const char* key, const std::string& path) {
    const auto& v = require(obj, key, path);
    if (!v.is_string()) throw Error(ErrorCode::syntax, std::string("'") + key + "' must be a string", path + "." + key);
    return v.get<std::string>();
}

inline const Json& require_array(const Json& obj, const char* key, const std::string& path) {
    const auto& v = require(obj, key, path);
    if (!v.is_array()) throw Error(ErrorCode::syntax, std::string("'") + key + "' must be an array", path + "." + key);
    return v;
}

inline void require_object(const Json& v, const std::string& path) {
    if (!v.is_object()) throw Error(ErrorCode::syntax, "expected an object", path);
}

inline PropertyDef parse_property(const Json& j, const std::string& path, bool allow_aggregate) {
    require_object(j, path);
    if (allow_aggregate) {
        reject_unknown_keys(j, {"PropertyName", "PropertyType", "Description", "AggregateExpression"}, path);
    } else {
        reject_unknown_keys(j, {"PropertyName", "PropertyType", "Description"}, path);
    }
    PropertyDef p;
    p.name = require_string(j, "PropertyName", path);
    const auto type_name = require_string(j, "PropertyType", path);
    auto type = property_type_from_string(type_name);
    if (!type) {
        throw Error(ErrorCode::unknown_property_type, "unknown property type '" + type_name + "'",
                    path + ".PropertyType");
    }
    p.type = *type;
    p.description = require_string(j, "Description", path);
    return p;
}

inline FilterSpec parse_filters(const Json& j, const std::string& path) {
    require_object(j, path);
    reject_unknown_keys(j, {"From", "To", "Equals"}, path);
    FilterSpec f;
    if (auto it = j.find("From"); it != j.end()) {
        if (!it->is_number_integer()) throw Error(ErrorCode::syntax, "'From' must be epoch ms", path + ".From");
        f.from = it->get<EpochMs>();
    }
    if (auto it = j.find("To"); it != j.end()) {
        if (!it->is_number_integer()) throw Error(ErrorCode::syntax, "'To' must be epoch ms", path + ".To");
        f.to = it->get<EpochMs>();
    }
    if (auto it = j.find("Equals"); it != j.end()) {
        require_object(*it, path + ".Equals");
        for (auto e = it->begin(); e != it->end(); ++e) {
            auto v = value_from_json(e.value());
            if (!v) throw Error(ErrorCode::syntax, "equality operand must be a scalar", path + ".Equals." + e.key());
            f.equals.emplace(e.key(), *v);
        }
    }
    return f;
}

inline AggregateExpression parse_aggregate(const Json& j, const std::string& path) {
    require_object(j, path);
    reject_unknown_keys(j, {"EventType", "PropertyName", "Op", "GroupBy", "Filters"}, path);
    AggregateExpression a;
    a.source_event_type = require_string(j, "EventType", path);
    a.source_property = require_string(j, "PropertyName", path);
    const auto op_name = require_string(j, "Op", path);
    auto op = operator_from_string(op_name);
    if (!op) throw Error(ErrorCode::unknown_operator, "unknown operator '" + op_name + "'", path + ".Op");
    a.op = *op;
    if (auto it = j.find("GroupBy"); it != j.end()) {
        if (!it->is_array()) throw Error(ErrorCode::syntax, "'GroupBy' must be an array", path + ".GroupBy");
        a.group_by.clear();
        for (const auto& k : *it) {
            if (!k.is_string()) throw Error(ErrorCode::syntax, "group key must be a string", path + ".GroupBy");
            a.group_by.push_back(k.get<std::string>());
        }
    }
    if (auto it = j.find("Filters"); it != j.end()) a.filters = parse_filters(*it, path + ".Filters");
    return a;
}

}  // namespace detail

inline MemorySchema schema_from_json(const Json& doc) {
    using namespace detail;
    require_object(doc, "$");
    reject_unknown_keys(doc, {"tenant", "version", "events", "entities"}, "$");
    MemorySchema s;
    if (auto it = doc.find("tenant"); it != doc.end()) {
        if (!it->is_string()) throw Error(ErrorCode::syntax, "'tenant' must be a string", "$.tenant");
        s.tenant = it->get<std::string>();
    }
    if (auto it = doc.find("version"); it != doc.end()) {
        if (!it->is_number_integer()) throw Error(ErrorCode::syntax, "'version' must be an integer", "$.version");
        s.version = it->get<std::int64_t>();
    }
    const auto& events = require_array(doc, "events", "$");
    for (std::size_t i = 0; i < events.size(); ++i) {
        const std::string path = "$.events[" + std::to_string(i) + "]";
        const auto& e = events[i];
        require_object(e, path);
        reject_unknown_keys(e, {"EventType", "Description", "Properties", "InstanceWeightField"}, path);
        EventTypeDef def;
        def.event_type = require_string(e, "EventType", path);
        def.description = require_string(e, "Description", path);
        const auto& props = require_array(e, "Properties", path);
        for (std::size_t k = 0; k < props.size(); ++k) {
            def.properties.push_back(
                parse_property(props[k], path + ".Properties[" + std::to_string(k) + "]", false));
        }
        if (auto it = e.find("InstanceWeightField"); it != e.end()) {
            if (!it->is_string())
                throw Error(ErrorCode::syntax, "'InstanceWeightField' must be a string", path + ".InstanceWeightField");
            def.instance_weight_field = it->get<std::string>();
        }
        s.events.push_back(std::move(def));
    }
    if (auto ents = doc.find("entities"); ents != doc.end()) {
        if (!ents->is_array()) throw Error(ErrorCode::syntax, "'entities' must be an array", "$.entities");
        for (std::size_t i = 0; i < ents->size(); ++i) {
            const std::string path = "$.entities[" + std::to_string(i) + "]";
            const auto& e = (*ents)[i];
            require_object(e, path);
            reject_unknown_keys(e, {"EntityType", "Description", "Properties"}, path);
            EntityTypeDef def;
            def.entity_type = require_string(e, "EntityType", path);
            def.description = require_string(e, "Description", path);
            const auto& props = require_array(e, "Properties", path);
            for (std::size_t k = 0; k < props.size(); ++k) {
                const std::string ppath = path + ".Properties[" + std::to_string(k) + "]";
                EntityPropertyDef p;
                p.def = parse_property(props[k], ppath, true);
                p.aggregate = parse_aggregate(require(props[k], "AggregateExpression", ppath),
                                              ppath + ".AggregateExpression");
                def.properties.push_back(std::move(p));
            }
            s.entities.push_back(std::move(def));
        }
    }
    return s;
}

// Parses a schema document. Syntax errors carry the byte offset reported by
// the JSON parser.
inline MemorySchema parse_schema(std::string_view document) {
    Json doc;
    try {
        doc = Json::parse(document.begin(), document.end());
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::syntax, e.what(), "$", {}, e.byte);
    }
    return schema_from_json(doc);
}

inline OrderedJson schema_to_json(const MemorySchema& s) {
    OrderedJson doc;
    doc["tenant"] = s.tenant;
    doc["version"] = s.version;
    auto prop_json = [](const PropertyDef& p) {
        OrderedJson j;
        j["PropertyName"] = p.name;
        j["PropertyType"] = to_string(p.type);
        j["Description"] = p.description;
        return j;
    };
    doc["events"] = OrderedJson::array();
    for (const auto& e : s.events) {
        OrderedJson j;
        j["EventType"] = e.event_type;
        j["Description"] = e.description;
        j["Properties"] = OrderedJson::array();
        for (const auto& p : e.properties) j["Properties"].push_back(prop_json(p));
        if (e.instance_weight_field) j["InstanceWeightField"] = *e.instance_weight_field;
        doc["events"].push_back(std::move(j));
    }
    doc["entities"] = OrderedJson::array();
    for (const auto& e : s.entities) {
        OrderedJson j;
        j["EntityType"] = e.entity_type;
        j["Description"] = e.description;
        j["Properties"] = OrderedJson::array();
        for (const auto& p : e.properties) {
            auto pj = prop_json(p.def);
            OrderedJson agg;
            agg["EventType"] = p.aggregate.source_event_type;
            agg["PropertyName"] = p.aggregate.source_property;
            agg["Op"] = to_string(p.aggregate.op);
            agg["GroupBy"] = p.aggregate.group_by;
            if (!p.aggregate.filters.empty()) {
                OrderedJson f;
                if (p.aggregate.filters.from) f["From"] = *p.aggregate.filters.from;
                if (p.aggregate.filters.to) f["To"] = *p.aggregate.filters.to;
                if (!p.aggregate.filters.equals.empty()) {
                    OrderedJson eq = OrderedJson::object();
                    for (const auto& [k, v] : p.aggregate.filters.equals) eq[k] = value_to_json<OrderedJson>(v);
                    f["Equals"] = std::move(eq);
                }
                agg["Filters"] = std::move(f);
            }
            pj["AggregateExpression"] = std::move(agg);
            j["Properties"].push_back(std::move(pj));
        }
        doc["entities"].push_back(std::move(j));
    }
    return doc;
}

inline std::string serialize_schema(const MemorySchema& s) { return schema_to_json(s).dump(2); }

// ---------------------------------------------------------------------------
// Validation

enum class Severity { error, info };

struct Violation {
    std::string path;
    std::string message;
    Severity severity = Severity::error;

    bool operator==(const Violation&) const = default;
};

struct ValidationReport {
    std::vector<Violation> violations;

    bool ok() const {
        return std::none_of(violations.begin(), violations.end(),
                            [](const Violation& v) { return v.severity == Severity::error; });
    }
    std::size_t error_count() const {
        return static_cast<std::size_t>(std::count_if(violations.begin(), violations.end(), [](const Violation& v) {
            return v.severity == Severity::error;
        }));
    }
};

// Metadata fields every event carries; usable as group keys.
inline bool is_builtin_group_key(std::string_view k) {
    return k == "user" || k == "topic" || k == "session" || k == "event_type";
}

inline ValidationReport validate_schema(const MemorySchema& s) {
    ValidationReport r;
    auto err = [&](std::string path, std::string msg) { r.violations.push_back({std::move(path), std::move(msg)}); };

    auto check_props = [&](const std::vector<PropertyDef>& props, const std::string& path) {
        std::set<std::string> seen;
        for (std::size_t k = 0; k < props.size(); ++k) {
            const auto ppath = path + ".Properties[" + std::to_string(k) + "]";
            if (props[k].name.empty()) err(ppath + ".PropertyName", "property name is empty");
            if (!seen.insert(props[k].name).second) err(ppath + ".PropertyName", "duplicate property '" + props[k].name + "'");
            if (text::trim(props[k].description).empty()) err(ppath + ".Description", "property description is empty");
        }
    };

    std::set<std::string> event_names;
    for (std::size_t i = 0; i < s.events.size(); ++i) {
        const auto& e = s.events[i];
        const auto path = "$.events[" + std::to_string(i) + "]";
        if (e.event_type.empty()) err(path + ".EventType", "event type is empty");
        if (!event_names.insert(e.event_type).second) err(path + ".EventType", "duplicate event type '" + e.event_type + "'");
        if (text::trim(e.description).empty()) err(path + ".Description", "event description is empty");
        check_props(e.properties, path);
        if (e.instance_weight_field) {
            const auto* p = e.find(*e.instance_weight_field);
            if (p == nullptr) {
                err(path + ".InstanceWeightField", "instance weight field '" + *e.instance_weight_field + "' does not exist");
            } else if (!is_numeric_type(p->type)) {
                err(path + ".InstanceWeightField", "instance weight field must be numeric");
            }
        }
    }

    std::set<std::string> entity_names;
    std::map<std::pair<std::string, std::string>, int> fan_out;
    for (std::size_t i = 0; i < s.entities.size(); ++i) {
        const auto& e = s.entities[i];
        const auto path = "$.entities[" + std::to_string(i) + "]";
        if (e.entity_type.empty()) err(path + ".EntityType", "entity type is empty");
        if (!entity_names.insert(e.entity_type).second)
            err(path + ".EntityType", "duplicate entity type '" + e.entity_type + "'");
        if (text::trim(e.description).empty()) err(path + ".Description", "entity description is empty");
        std::vector<PropertyDef> defs;
        for (const auto& p : e.properties) defs.push_back(p.def);
        check_props(defs, path);

        for (std::size_t k = 0; k < e.properties.size(); ++k) {
            const auto& p = e.properties[k];
            const auto& a = p.aggregate;
            const auto apath = path + ".Properties[" + std::to_string(k) + "].AggregateExpression";
            const auto* ev = s.find_event(a.source_event_type);
            if (ev == nullptr) {
                err(apath + ".EventType", "unresolved source_event_type '" + a.source_event_type + "'");
                continue;
            }
            const auto* src = ev->find(a.source_property);
            if (src == nullptr) {
                err(apath + ".PropertyName", "unresolved source_property '" + a.source_property + "'");
                continue;
            }
            ++fan_out[{a.source_event_type, a.source_property}];
            const char* op = to_string(a.op);
            switch (a.op) {
                case OperatorKind::SUM:
                case OperatorKind::AVG:
                case OperatorKind::MAX:
                    if (!is_numeric_type(src->type)) err(apath + ".Op", std::string(op) + " requires numeric source");
                    if (!is_numeric_type(p.def.type)) err(apath + ".Op", std::string(op) + " requires a numeric entity property");
                    break;
                case OperatorKind::COUNT:
                    if (!is_numeric_type(p.def.type)) err(apath + ".Op", "COUNT requires a numeric entity property");
                    break;
                case OperatorKind::LLM_MERGE:
                case OperatorKind::TIME_COMPRESS:
                    if (src->type != PropertyType::string) err(apath + ".Op", std::string(op) + " requires string source");
                    if (p.def.type != PropertyType::string)
                        err(apath + ".Op", std::string(op) + " requires a string entity property");
                    break;
            }
            if (a.group_by.empty()) err(apath + ".GroupBy", "at least one group key is required");
            for (const auto& g : a.group_by) {
                if (!is_builtin_group_key(g) && ev->find(g) == nullptr)
                    err(apath + ".GroupBy", "unresolved group key '" + g + "'");
            }
            for (const auto& [name, _] : a.filters.equals) {
                if (!is_builtin_group_key(name) && ev->find(name) == nullptr)
                    err(apath + ".Filters.Equals." + name, "unresolved filter property '" + name + "'");
            }
            if (a.filters.from && a.filters.to && *a.filters.from >= *a.filters.to)
                err(apath + ".Filters", "empty time window");
        }
    }
    for (const auto& [key, n] : fan_out) {
        if (n > 1) {
            r.violations.push_back({"$.events", "event property " + key.first + "." + key.second + " feeds " +
                                                     std::to_string(n) + " entity properties",
                                    Severity::info});
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Event conformance

inline std::string properties_json_dump(const PropertyMap& m) {
    Json j = Json::object();
    for (const auto& [k, v] : m) j[k] = value_to_json<Json>(v);
    return j.dump();
}

namespace detail {

inline std::optional<Value> coerce(const Json& v, PropertyType t) {
    switch (t) {
        case PropertyType::string:
            if (v.is_string()) return Value{v.get<std::string>()};
            if (v.is_number() || v.is_boolean()) return Value{render(*value_from_json(v))};
            return std::nullopt;
        case PropertyType::number:
            if (v.is_number()) return Value{v.get<double>()};
            if (v.is_string()) {
                const auto s = std::string(text::trim(v.get_ref<const std::string&>()));
                double d = 0;
                auto res = std::from_chars(s.data(), s.data() + s.size(), d);
                if (!s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(d))
                    return Value{d};
            }
            return std::nullopt;
        case PropertyType::integer:
        case PropertyType::timestamp:
            if (v.is_number_integer()) return Value{v.get<std::int64_t>()};
            if (v.is_number_float()) {
                const double d = v.get<double>();
                if (std::isfinite(d) && d == std::floor(d) && std::fabs(d) < 9.0e15)
                    return Value{static_cast<std::int64_t>(d)};
                return std::nullopt;
            }
            if (v.is_string()) {
                const auto s = std::string(text::trim(v.get_ref<const std::string&>()));
                std::int64_t i = 0;
                auto res = std::from_chars(s.data(), s.data() + s.size(), i);
                if (!s.empty() && res.ec == std::errc() && res.ptr == s.data() + s.size()) return Value{i};
            }
            return std::nullopt;
        case PropertyType::boolean:
            if (v.is_boolean()) return Value{v.get<bool>()};
            if (v.is_string()) {
                const auto s = text::lower(text::trim(v.get_ref<const std::string&>()));
                if (s == "true") return Value{true};
                if (s == "false") return Value{false};
            }
            return std::nullopt;
    }
    return std::nullopt;
}

}  // namespace detail

// Conforms raw (typically LLM-produced) key/value pairs to an event type.
// Extra keys are dropped and reported through `warnings`; every declared
// property is required.
inline EventInstance conform_event(const Json& raw, const EventTypeDef& def, EpochMs ts,
                                   std::vector<std::string>* warnings = nullptr) {
    if (!raw.is_object()) throw Error(ErrorCode::type_mismatch, "event properties must be an object", def.event_type);
    if (ts <= 0) throw Error(ErrorCode::invalid_argument, "event timestamp must be positive", def.event_type);
    EventInstance ev;
    ev.event_type = def.event_type;
    ev.timestamp = ts;
    for (const auto& p : def.properties) {
        auto it = raw.find(p.name);
        if (it == raw.end() || it->is_null()) {
            throw Error(ErrorCode::missing_property, "missing property '" + p.name + "'", def.event_type + "." + p.name);
        }
        auto v = detail::coerce(*it, p.type);
        if (!v) {
            throw Error(ErrorCode::type_mismatch,
                        "property '" + p.name + "' expects " + to_string(p.type) + ", got " + it->dump(),
                        def.event_type + "." + p.name);
        }
        ev.properties.emplace(p.name, std::move(*v));
    }
    if (warnings != nullptr) {
        for (auto it = raw.begin(); it != raw.end(); ++it) {
            if (def.find(it.key()) == nullptr)
                warnings->push_back("dropped unknown property '" + it.key() + "' on " + def.event_type);
        }
    }
    ev.id = "ev-" + text::hex64(text::fnv1a(def.event_type + "|" + std::to_string(ts) + "|" +
                                            properties_json_dump(ev.properties)));
    return ev;
}

inline EventInstance conform_event(const PropertyMap& raw, const EventTypeDef& def, EpochMs ts,
                                   std::vector<std::string>* warnings = nullptr) {
    Json j = Json::object();
    for (const auto& [k, v] : raw) j[k] = value_to_json<Json>(v);
    return conform_event(j, def, ts, warnings);
}

// Renders event properties as "name: value" lines in schema order. This is the
// searchable text of an event and the basis of similarity-based dedup. The
// property named "keywords" feeds the keyword graph and is left out.
inline std::string event_text(const EventInstance& ev, const EventTypeDef* def = nullptr) {
    std::string out;
    auto emit = [&](const std::string& k, const Value& v) {
        if (k == "keywords") return;
        if (!out.empty()) out += "\n";
        out += k + ": " + render(v);
    };
    if (def != nullptr) {
        for (const auto& p : def->properties) {
            if (auto it = ev.properties.find(p.name); it != ev.properties.end()) emit(it->first, it->second);
        }
    } else {
        for (const auto& [k, v] : ev.properties) emit(k, v);
    }
    return out;
}

inline std::string entity_text(const EntityInstance& e) {
    std::string out = e.entity_type + " [" + e.group_key + "]";
    for (const auto& [k, v] : e.properties) out += "\n" + k + ": " + render(v);
    return out;
}

// JSON codecs for instances (persistence and HTTP bodies).

inline Json properties_to_json(const PropertyMap& m) {
    Json j = Json::object();
    for (const auto& [k, v] : m) j[k] = value_to_json<Json>(v);
    return j;
}

inline PropertyMap properties_from_json(const Json& j) {
    PropertyMap m;
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (auto v = value_from_json(it.value())) m.emplace(it.key(), *v);
    }
    return m;
}

inline Json to_json(const EventInstance& e) {
    Json j{{"id", e.id},
           {"event_type", e.event_type},
           {"timestamp", e.timestamp},
           {"properties", properties_to_json(e.properties)},
           {"source_session", e.source_session},
           {"user", e.user},
           {"schema_version", e.schema_version}};
    if (e.topic) j["topic"] = *e.topic;
    if (e.ttl_deadline) j["ttl_deadline"] = *e.ttl_deadline;
    return j;
}

inline EventInstance event_from_json(const Json& j) {
    EventInstance e;
    e.id = j.at("id").get<std::string>();
    e.event_type = j.at("event_type").get<std::string>();
    e.timestamp = j.at("timestamp").get<EpochMs>();
    e.properties = properties_from_json(j.at("properties"));
    e.source_session = j.value("source_session", "");
    e.user = j.value("user", "");
    e.schema_version = j.value("schema_version", std::int64_t{0});
    if (j.contains("topic")) e.topic = j.at("topic").get<std::string>();
    if (j.contains("ttl_deadline")) e.ttl_deadline = j.at("ttl_deadline").get<EpochMs>();
    return e;
}

inline Json to_json(const EntityInstance& e) {
    Json acc = Json::object();
    for (const auto& [k, a] : e.accumulators) acc[k] = {{"sum", a.sum}, {"count", a.count}};
    return Json{{"id", e.id},
                {"entity_type", e.entity_type},
                {"group_key", e.group_key},
                {"properties", properties_to_json(e.properties)},
                {"accumulators", acc},
                {"version", e.version},
                {"updated_at", e.updated_at}};
}

inline EntityInstance entity_from_json(const Json& j) {
    EntityInstance e;
    e.id = j.at("id").get<std::string>();
    e.entity_type = j.at("entity_type").get<std::string>();
    e.group_key = j.at("group_key").get<std::string>();
    e.properties = properties_from_json(j.at("properties"));
    for (auto it = j.at("accumulators").begin(); it != j.at("accumulators").end(); ++it) {
        e.accumulators[it.key()] = {it.value().at("sum").get<double>(), it.value().at("count").get<std::int64_t>()};
    }
    e.version = j.at("version").get<std::int64_t>();
    e.updated_at = j.at("updated_at").get<EpochMs>();
    return e;
}

}  // namespace membase
