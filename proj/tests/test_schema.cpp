#include <gtest/gtest.h>

#include "support.hpp"

using namespace membase;
using namespace membase::testing;

namespace {

const char* kMinimal = R"({
  "events": [{"EventType": "Note", "Description": "a note",
              "Properties": [{"PropertyName": "text", "PropertyType": "string", "Description": "body"}]}]
})";

bool has_violation(const ValidationReport& r, const std::string& needle) {
    for (const auto& v : r.violations)
        if (v.message.find(needle) != std::string::npos) return true;
    return false;
}

}  // namespace

TEST(ParseSchema, MinimalDocument) {
    const auto s = parse_schema(kMinimal);
    EXPECT_EQ(s.events.size(), 1u);
    EXPECT_EQ(s.entities.size(), 0u);
    EXPECT_EQ(s.tenant, "default");
    EXPECT_EQ(s.version, 1);
}

TEST(ParseSchema, AgentToolSample) {
    const auto s = load_sample_schema("agent_tool_schema.json");
    ASSERT_EQ(s.events.size(), 1u);
    ASSERT_EQ(s.entities.size(), 1u);
    const auto& ev = s.events[0];
    EXPECT_EQ(ev.event_type, "ToolInvocation");
    std::vector<std::string> names;
    for (const auto& p : ev.properties) names.push_back(p.name);
    EXPECT_EQ(names, (std::vector<std::string>{"tool", "situation", "goal", "success"}));
    const auto& agg = s.entities[0].properties[0].aggregate;
    EXPECT_EQ(agg.op, OperatorKind::LLM_MERGE);
    EXPECT_EQ(agg.source_event_type, "ToolInvocation");
    EXPECT_EQ(agg.source_property, "situation");
    EXPECT_EQ(agg.group_by, std::vector<std::string>{"tool"});
    EXPECT_TRUE(validate_schema(s).ok());
}

TEST(ParseSchema, UnknownOperator) {
    auto doc = Json::parse(read_text_file(sample("education_schema.json")));
    doc["entities"][0]["Properties"][0]["AggregateExpression"]["Op"] = "MEDIAN";
    try {
        parse_schema(doc.dump());
        FAIL() << "expected unknown_operator";
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unknown_operator);
        EXPECT_EQ(e.path(), "$.entities[0].Properties[0].AggregateExpression.Op");
    }
}

TEST(ParseSchema, UnknownPropertyType) {
    auto doc = Json::parse(kMinimal);
    doc["events"][0]["Properties"][0]["PropertyType"] = "object";
    try {
        parse_schema(doc.dump());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unknown_property_type);
    }
}

TEST(ParseSchema, SyntaxErrorReportsOffset) {
    const std::string bad = R"({"events": [ , ]})";
    try {
        parse_schema(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::syntax);
        ASSERT_NE(e.offset(), Error::npos);
        EXPECT_EQ(bad[e.offset() - 1], ',');
    }
}

TEST(ParseSchema, UnknownKeysRejected) {
    auto doc = Json::parse(kMinimal);
    doc["events"][0]["Colour"] = "red";
    try {
        parse_schema(doc.dump());
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::unknown_key);
        EXPECT_EQ(e.path(), "$.events[0].Colour");
    }
}

TEST(ParseSchema, AggregateDefaults) {
    const auto s = load_sample_schema("education_schema.json");
    const auto& attempts = s.entities[0].properties[1].aggregate;
    EXPECT_EQ(attempts.group_by, std::vector<std::string>{"user"});
    EXPECT_TRUE(attempts.filters.empty());
}

TEST(ValidateSchema, AvgOverString) {
    const auto r = validate_schema(load_sample_schema("avg_over_string_schema.json"));
    EXPECT_FALSE(r.ok());
    EXPECT_TRUE(has_violation(r, "AVG requires numeric source"));
    EXPECT_EQ(r.violations[0].path, "$.entities[0].Properties[0].AggregateExpression.Op");
}

TEST(ValidateSchema, UnresolvedEventType) {
    auto s = load_sample_schema("education_schema.json");
    s.entities[0].properties[0].aggregate.source_event_type = "QuizResult";
    const auto r = validate_schema(s);
    EXPECT_TRUE(has_violation(r, "unresolved source_event_type"));
}

TEST(ValidateSchema, EducationSchemaIsClean) {
    const auto r = validate_schema(load_sample_schema("education_schema.json"));
    EXPECT_TRUE(r.violations.empty());
}

TEST(ValidateSchema, FanOutIsInformational) {
    auto s = load_sample_schema("agent_tool_schema.json");
    EntityPropertyDef count{{"uses", PropertyType::integer, "number of calls"},
                            {"ToolInvocation", "situation", OperatorKind::COUNT, {"tool"}, {}}};
    s.entities[0].properties.push_back(count);
    const auto r = validate_schema(s);
    EXPECT_TRUE(r.ok());
    ASSERT_EQ(r.violations.size(), 1u);
    EXPECT_EQ(r.violations[0].severity, Severity::info);
}

TEST(ValidateSchema, GroupKeysAndFilters) {
    auto s = load_sample_schema("agent_tool_schema.json");
    auto& agg = s.entities[0].properties[0].aggregate;
    agg.group_by = {"toolname"};
    agg.filters.equals.emplace("nope", Value{true});
    agg.filters.from = 10;
    agg.filters.to = 5;
    const auto r = validate_schema(s);
    EXPECT_TRUE(has_violation(r, "unresolved group key 'toolname'"));
    EXPECT_TRUE(has_violation(r, "unresolved filter property 'nope'"));
    EXPECT_TRUE(has_violation(r, "empty time window"));
}

TEST(ConformEvent, LosslessCoercion) {
    const auto s = load_sample_schema("education_schema.json");
    const auto ev = conform_event(Json{{"exercise", "ex-1"}, {"score", "0.8"}}, s.events[0], 1000);
    EXPECT_EQ(std::get<double>(ev.properties.at("score")), 0.8);
    const auto ev2 = conform_event(Json{{"exercise", "ex-1"}, {"score", 1}}, s.events[0], 1000);
    EXPECT_EQ(std::get<double>(ev2.properties.at("score")), 1.0);
}

TEST(ConformEvent, TypeMismatchNamesProperty) {
    const auto s = load_sample_schema("education_schema.json");
    try {
        conform_event(Json{{"exercise", "ex-1"}, {"score", true}}, s.events[0], 1000);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::type_mismatch);
        EXPECT_NE(std::string(e.what()).find("score"), std::string::npos);
    }
}

TEST(ConformEvent, MissingProperty) {
    const auto s = load_sample_schema("education_schema.json");
    try {
        conform_event(Json{{"exercise", "ex-1"}}, s.events[0], 1000);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::missing_property);
        EXPECT_EQ(e.path(), "ExerciseResult.score");
    }
}

TEST(ConformEvent, AgentEventAndExtraKeys) {
    const auto s = load_sample_schema("agent_tool_schema.json");
    std::vector<std::string> warnings;
    const auto ev = conform_event(
        Json{{"tool", "web_search"}, {"success", true}, {"goal", "find docs"}, {"situation", "API lookup"}, {"mood", "ok"}},
        s.events[0], 5000, &warnings);
    EXPECT_EQ(ev.event_type, "ToolInvocation");
    EXPECT_EQ(ev.timestamp, 5000);
    EXPECT_EQ(std::get<bool>(ev.properties.at("success")), true);
    EXPECT_EQ(std::get<std::string>(ev.properties.at("tool")), "web_search");
    EXPECT_EQ(ev.properties.size(), 4u);
    ASSERT_EQ(warnings.size(), 1u);
    EXPECT_NE(warnings[0].find("mood"), std::string::npos);
}

// --- properties ----------------------------------------------------------

namespace {

MemorySchema random_schema(std::mt19937_64& rng) {
    std::uniform_int_distribution<int> small(1, 4);
    const std::array<PropertyType, 5> types{PropertyType::string, PropertyType::number, PropertyType::integer,
                                            PropertyType::boolean, PropertyType::timestamp};
    const std::array<OperatorKind, 6> ops{OperatorKind::SUM, OperatorKind::COUNT, OperatorKind::MAX,
                                          OperatorKind::AVG, OperatorKind::LLM_MERGE, OperatorKind::TIME_COMPRESS};
    MemorySchema s;
    s.tenant = "t" + std::to_string(rng() % 100);
    s.version = static_cast<std::int64_t>(rng() % 9) + 1;
    const int n_events = small(rng);
    for (int e = 0; e < n_events; ++e) {
        EventTypeDef def{"E" + std::to_string(e), "event " + std::to_string(e), {}, std::nullopt};
        const int n_props = small(rng);
        for (int p = 0; p < n_props; ++p)
            def.properties.push_back({"p" + std::to_string(p), types[rng() % types.size()], "prop \"" + std::to_string(p) + "\""});
        if (rng() % 3 == 0) def.instance_weight_field = def.properties[0].name;
        s.events.push_back(std::move(def));
    }
    const int n_entities = small(rng) - 1;
    for (int e = 0; e < n_entities; ++e) {
        EntityTypeDef def{"N" + std::to_string(e), "entity", {}};
        const int n_props = small(rng);
        for (int p = 0; p < n_props; ++p) {
            const auto& src = s.events[rng() % s.events.size()];
            AggregateExpression a{src.event_type, src.properties[rng() % src.properties.size()].name, ops[rng() % ops.size()],
                                  {"user"}, {}};
            if (rng() % 2) a.group_by.push_back("topic");
            if (rng() % 3 == 0) a.filters.from = static_cast<EpochMs>(rng() % 1000);
            if (rng() % 3 == 0) a.filters.to = static_cast<EpochMs>(1000 + rng() % 1000);
            if (rng() % 3 == 0) a.filters.equals.emplace("user", Value{std::string("u1")});
            if (rng() % 4 == 0) a.filters.equals.emplace("event_type", Value{std::int64_t{3}});
            def.properties.push_back({{"q" + std::to_string(p), types[rng() % types.size()], "d"}, std::move(a)});
        }
        s.entities.push_back(std::move(def));
    }
    return s;
}

}  // namespace

TEST(SchemaProperties, SerializeRoundTrip) {
    std::mt19937_64 rng(11);
    for (int i = 0; i < 300; ++i) {
        const auto s = random_schema(rng);
        const auto text = serialize_schema(s);
        const auto back = parse_schema(text);
        ASSERT_EQ(back, s) << text;
        ASSERT_EQ(serialize_schema(back), text);
    }
}

TEST(SchemaProperties, ValidationIsTotal) {
    std::mt19937_64 rng(12);
    for (int i = 0; i < 300; ++i) {
        auto s = random_schema(rng);
        // break references at random
        for (auto& e : s.entities)
            for (auto& p : e.properties) {
                if (rng() % 4 == 0) p.aggregate.source_event_type = "Missing";
                if (rng() % 4 == 0) p.aggregate.source_property = "missing";
                if (rng() % 5 == 0) p.aggregate.group_by.clear();
            }
        if (rng() % 3 == 0 && !s.events.empty()) s.events.push_back(s.events.front());
        EXPECT_NO_THROW(validate_schema(s));
    }
}

TEST(SchemaProperties, ConformEitherSucceedsCompletelyOrThrows) {
    std::mt19937_64 rng(13);
    const std::array<Json, 8> values{Json("text"), Json(3), Json(2.5), Json(true), Json("17"), Json("x1"), Json(nullptr),
                                     Json::array()};
    for (int i = 0; i < 500; ++i) {
        const auto s = random_schema(rng);
        const auto& def = s.events[rng() % s.events.size()];
        Json raw = Json::object();
        for (const auto& p : def.properties)
            if (rng() % 6 != 0) raw[p.name] = values[rng() % values.size()];
        try {
            const auto ev = conform_event(raw, def, 1000);
            ASSERT_EQ(ev.properties.size(), def.properties.size());
            for (const auto& p : def.properties) {
                const auto& v = ev.properties.at(p.name);
                switch (p.type) {
                    case PropertyType::string: ASSERT_TRUE(std::holds_alternative<std::string>(v)); break;
                    case PropertyType::number: ASSERT_TRUE(std::holds_alternative<double>(v)); break;
                    case PropertyType::integer:
                    case PropertyType::timestamp: ASSERT_TRUE(std::holds_alternative<std::int64_t>(v)); break;
                    case PropertyType::boolean: ASSERT_TRUE(std::holds_alternative<bool>(v)); break;
                }
            }
        } catch (const Error& e) {
            ASSERT_TRUE(e.code() == ErrorCode::type_mismatch || e.code() == ErrorCode::missing_property) << e.what();
        }
    }
}
