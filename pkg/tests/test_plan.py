import json

import pytest

from quite.db.plan import parse_explain_json, plan_summary

# Shape produced by EXPLAIN (FORMAT JSON) on a CTE + join query.
PG_DOC = [
    {
        "Plan": {
            "Node Type": "Aggregate",
            "Strategy": "Plain",
            "Startup Cost": 910.0,
            "Total Cost": 911.0,
            "Plan Rows": 1,
            "Plan Width": 8,
            "Plans": [
                {
                    "Node Type": "Seq Scan",
                    "Relation Name": "sale",
                    "Alias": "s",
                    "Startup Cost": 0.0,
                    "Total Cost": 155.0,
                    "Plan Rows": 10000,
                    "Plan Width": 4,
                    "Subplan Name": "CTE big_sales",
                },
                {
                    "Node Type": "Hash Join",
                    "Join Type": "Inner",
                    "Startup Cost": 20.0,
                    "Total Cost": 700.0,
                    "Plan Rows": 500,
                    "Plan Width": 12,
                    "Plans": [
                        {
                            "Node Type": "CTE Scan",
                            "CTE Name": "big_sales",
                            "Alias": "big_sales",
                            "Startup Cost": 0.0,
                            "Total Cost": 200.0,
                            "Plan Rows": 10000,
                            "Plan Width": 4,
                        },
                        {
                            "Node Type": "Hash",
                            "Startup Cost": 15.0,
                            "Total Cost": 15.0,
                            "Plan Rows": 1000,
                            "Plan Width": 8,
                            "Plans": [
                                {
                                    "Node Type": "Index Scan",
                                    "Relation Name": "prod",
                                    "Alias": "p",
                                    "Index Name": "prod_pkey",
                                    "Startup Cost": 0.0,
                                    "Total Cost": 15.0,
                                    "Plan Rows": 1000,
                                    "Plan Width": 8,
                                }
                            ],
                        },
                    ],
                },
            ],
        }
    }
]


class TestParseExplainJson:
    def test_parses_server_list_shape(self):
        tree = parse_explain_json(PG_DOC)
        assert tree.root.node_type == "Aggregate"
        assert tree.root.total_cost == 911.0

    def test_parses_json_string(self):
        tree = parse_explain_json(json.dumps(PG_DOC))
        assert tree.root.total_cost == 911.0

    def test_root_total_cost_extraction(self):
        tree = parse_explain_json({"Plan": {"Node Type": "Result", "Total Cost": 123.45}})
        assert tree.root.total_cost == 123.45

    def test_empty_document_rejected(self):
        with pytest.raises(ValueError):
            parse_explain_json([])

    def test_negative_rows_rejected(self):
        with pytest.raises(ValueError):
            parse_explain_json({"Plan": {"Node Type": "Result", "Plan Rows": -1}})

    def test_operator_kinds(self):
        tree = parse_explain_json(PG_DOC)
        kinds = {n.node_type: n.kind for n in tree.iter_nodes()}
        assert kinds["Aggregate"] == "aggregate"
        assert kinds["Hash Join"] == "join"
        assert kinds["Seq Scan"] == "scan"
        assert kinds["CTE Scan"] == "scan"
        assert kinds["Hash"] == "other"

    def test_cte_helpers(self):
        tree = parse_explain_json(PG_DOC)
        assert tree.cte_scan_counts() == {"big_sales": 1}
        sub = tree.cte_subplan("big_sales")
        assert sub is not None and sub.relation == "sale"
        assert tree.cte_subplan("missing") is None

    def test_joins_and_base_relations(self):
        tree = parse_explain_json(PG_DOC)
        joins = tree.joins()
        assert len(joins) == 1
        rels = tree.base_relations(joins[0])
        assert rels == ["big_sales", "p"]

    def test_plan_summary_mentions_costs_and_relations(self):
        text = plan_summary(parse_explain_json(PG_DOC))
        assert "Aggregate" in text
        assert "cost=910.00..911.00" in text
        assert "on p" in text
