"""Validates report.json files against the published schema and checks
that the summary rows agree with a recomputation from the per-seed rows."""
import json
import statistics
import sys

import jsonschema


def check_summary(report):
    for cell in report["summary"]:
        adv = [r["adv_acc"] for r in report["rows"]
               if r["attack"] == cell["attack"] and r["target"] == cell["target"]]
        assert len(adv) == cell["seeds"], cell
        assert abs(statistics.fmean(adv) - cell["adv_mean"]) < 1e-9, cell
        if len(adv) >= 2:
            assert abs(statistics.stdev(adv) - cell["adv_std"]) < 1e-9, cell
        else:
            assert "adv_std" not in cell, cell


def main(schema_path, *reports):
    with open(schema_path) as f:
        schema = json.load(f)
    jsonschema.Draft202012Validator.check_schema(schema)
    for path in reports:
        with open(path) as f:
            report = json.load(f)
        jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
        check_summary(report)
        print(f"{path}: ok")


if __name__ == "__main__":
    main(*sys.argv[1:])
