"""Synthetic demo corpus: six vocabulary-disjoint topics in generic tabular form.

The bundled ``data/demo_corpus.csv`` is the output of :func:`write_demo_corpus`
with the default seed; regenerate it with ``python -m harmonizer.demo``.
"""
from __future__ import annotations

import csv
import io
import random
import sys
from pathlib import Path

TOPICS: dict[str, dict[str, list[str]]] = {
    "education": {
        "nouns": ["education", "school", "schooling", "degree", "diploma", "grade", "college",
                  "university", "classroom", "student"],
        "definitions": [
            "Highest {N1} level of education completed at {N2} or {N3}.",
            "Years of formal education and {N1} {N2} attained.",
            "Education {N1}: whether a {N2} or {N3} education was completed.",
        ],
        "values": ["Less than high school", "High school diploma", "Some college", "Bachelor degree",
                   "Graduate degree", "Vocational school certificate", "Doctorate degree"],
    },
    "housing": {
        "nouns": ["housing", "home", "rent", "mortgage", "landlord", "apartment", "shelter", "eviction",
                  "residence", "tenant"],
        "definitions": [
            "Current housing {N1} situation, {N2} or {N3} housing.",
            "Housing stability: risk of {N1} {N2} or losing {N3}.",
            "Type of housing {N1} and {N2} {N3} arrangement.",
        ],
        "values": ["Own home", "Rent apartment", "Living with relatives housing", "Shelter", "Unsheltered",
                   "Mobile home", "Public housing"],
    },
    "nutrition": {
        "nouns": ["food", "meal", "diet", "nutrition", "hunger", "groceries", "vegetables", "fruit",
                  "breakfast", "pantry"],
        "definitions": [
            "Food {N1} insecurity: enough food {N2} and {N3} to eat.",
            "Frequency of food {N1} {N2} and {N3} nutrition.",
            "Food and nutrition intake, {N1} {N2} {N3}.",
        ],
        "values": ["Never hungry", "Sometimes hungry for food", "Often hungry for food", "Skipped meals",
                   "Food stamps", "Daily fruit and vegetables", "Fast food"],
    },
    "transport": {
        "nouns": ["transportation", "bus", "vehicle", "car", "commute", "transit", "train", "driving",
                  "taxi", "bicycle"],
        "definitions": [
            "Transportation {N1} access by {N2} or {N3} transportation.",
            "Lack of transportation {N1} kept from {N2} {N3} travel.",
            "Usual transportation mode: {N1}, {N2} or {N3}.",
        ],
        "values": ["Personal car", "Public bus transit", "Subway train", "Walking", "Bicycle",
                   "Rideshare taxi", "Paratransit van"],
    },
    "employment": {
        "nouns": ["employment", "job", "occupation", "employer", "wage", "salary", "workplace", "career",
                  "unemployment", "paycheck"],
        "definitions": [
            "Employment {N1} status, {N2} and {N3} employment.",
            "Current employment {N1}: {N2} {N3} job held.",
            "Employment history of {N1} {N2} and {N3} work.",
        ],
        "values": ["Full-time employed", "Part-time employed", "Unemployed seeking work", "Retired from work",
                   "Self-employed", "Unable to work", "Seasonal worker"],
    },
    "insurance": {
        "nouns": ["insurance", "coverage", "premium", "deductible", "medicaid", "medicare", "policy",
                  "claim", "copay", "insurer"],
        "definitions": [
            "Health insurance {N1} coverage by {N2} or {N3} insurance.",
            "Insurance coverage {N1}: {N2} {N3} insurance plan.",
            "Type of insurance {N1} and {N2} {N3} coverage.",
        ],
        "values": ["Private insurance", "Medicaid insurance", "Medicare insurance", "Uninsured",
                   "Military coverage", "Employer insurance plan", "Marketplace insurance plan"],
    },
}

STEWARDS = ["NINDS", "NHLBI", "LOINC", "GRDR", "NCI", "NICHD", "RADx-UP", "SchARE", "NEI", "NLM"]


def _record(rng: random.Random, topic: str) -> dict[str, str]:
    vocab = TOPICS[topic]
    nouns = rng.sample(vocab["nouns"], 3)
    fill = {"N1": nouns[0], "N2": nouns[1], "N3": nouns[2]}
    designation = f"{nouns[0]} {nouns[1]}" if rng.random() < 0.5 else f"{topic_word(topic)} {nouns[0]}"
    designation = designation[0].upper() + designation[1:]
    definition = rng.choice(vocab["definitions"] + [""]).format(**fill)
    k = rng.choice([0, 2, 3, 4])
    values = ", ".join(rng.sample(vocab["values"], k)) if k else ""
    return {
        "designation": designation,
        "definition": definition,
        "permissible_values": values,
        "steward_org": rng.choice(STEWARDS),
        "topic": topic,
    }


def topic_word(topic: str) -> str:
    return TOPICS[topic]["nouns"][0]


def demo_rows(per_topic: int = 50, seed: int = 7) -> list[dict[str, str]]:
    rng = random.Random(seed)
    rows = [_record(rng, topic) for topic in TOPICS for _ in range(per_topic)]
    rng.shuffle(rows)
    for k, row in enumerate(rows):
        row["id"] = f"DEMO{k:04d}"
    return rows


def demo_csv(per_topic: int = 50, seed: int = 7) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(
        buf,
        fieldnames=["id", "designation", "definition", "permissible_values", "steward_org", "topic"],
        lineterminator="\n",
    )
    w.writeheader()
    w.writerows(demo_rows(per_topic, seed))
    return buf.getvalue()


def bundled_demo_path() -> Path:
    return Path(__file__).with_name("data") / "demo_corpus.csv"


def write_demo_corpus(path: str | Path, per_topic: int = 50, seed: int = 7) -> Path:
    path = Path(path)
    path.write_text(demo_csv(per_topic, seed), encoding="utf-8")
    return path


if __name__ == "__main__":
    write_demo_corpus(sys.argv[1] if len(sys.argv) > 1 else bundled_demo_path())
