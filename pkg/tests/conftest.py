"""Shared fixture builders: canned responses, seeded caches, mock backends."""
import json

from factpipe.gateway import MockBackend
from factpipe.records import Response
from factpipe.retrieval import SearchClient, normalize_query
from factpipe.segmenter import split_sentences
from factpipe.staged import build_extract_prompt


def fixture_response(n_sentences=14, rid="r0", system_id="sysA"):
    text = " ".join(f"Fact number {i} happened in {1900 + i}." for i in range(n_sentences))
    return Response(id=rid, response=text, system_id=system_id)


def claims_for(n_sentences=14, n_claims=23):
    """Distribute n_claims over n_sentences: earlier sentences carry the
    extras (e.g. 14 sentences, 23 claims -> nine 2s then five 1s)."""
    base, extra = divmod(n_claims, n_sentences)
    per_sentence = [base + (1 if i < extra else 0) for i in range(n_sentences)]
    out = []
    for i, count in enumerate(per_sentence):
        out.append([f"entity {i} did thing {j} in {1900 + i}" for j in range(count)])
    return out


def seed_query_cache(path, queries_to_snippets):
    """Write a replay cache mapping each query to a list of snippet texts."""
    with open(path, "a", encoding="utf-8") as fh:
        for query, texts in queries_to_snippets.items():
            results = [
                {"title": f"Result {i}", "url": f"http://cache.example/{abs(hash((query, i)))}",
                 "snippet": t, "rank": i}
                for i, t in enumerate(texts, start=1)
            ]
            fh.write(json.dumps({"query": normalize_query(query), "ts": 0, "results": results}) + "\n")


def staged_world(tmp_path, n_sentences=14, n_claims=23, supported=None, cache_name="cache.jsonl"):
    """A response, a mock backend with extraction fixtures, and an offline
    search client whose cache makes exactly `supported` claims verifiable."""
    response = fixture_response(n_sentences)
    sentences = split_sentences(response.response)
    per_sentence_claims = claims_for(n_sentences, n_claims)
    all_claims = [c for cs in per_sentence_claims for c in cs]
    supported = set(all_claims if supported is None else supported)

    backend = MockBackend(oracle=True)
    for sentence, claims in zip(sentences, per_sentence_claims):
        backend.record(
            build_extract_prompt(sentence, response.response),
            "\n".join(claims) if claims else "No verifiable claim.",
        )

    cache_path = tmp_path / cache_name
    seed_query_cache(
        cache_path,
        {c: ([f"evidence says {c} indeed"] if c in supported else ["unrelated text"])
         for c in all_claims},
    )
    # Sentence-level evidence for the same response (integrated pipeline).
    seed_query_cache(
        cache_path,
        {s.text: [f"confirmed: {s.text}"] for s in sentences},
    )
    client = SearchClient(cache_path=cache_path, offline=True)
    return response, backend, client, all_claims
