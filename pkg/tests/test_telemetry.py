import csv
import json
import threading

import pytest

from fedsim.telemetry import (
    AgentRecord,
    CsvSink,
    JsonlSink,
    NullSink,
    ProfileEntry,
    RoundReport,
    RssSample,
    TelemetryError,
    parse_line,
    read_csv_records,
    read_jsonl,
    serialize_line,
)

SAMPLE_RECORDS = [
    RoundReport(3, (1, 4, 9), 0.512, 0.875, 120, "fedavg"),
    AgentRecord(3, 4, 2, 0.611, 0.81, 50),
    ProfileEntry("local_train", 0.0125, 40, 0.5, 62.5),
    RssSample(3, 123_456_789),
]


class TestSchema:
    def test_round_record_field_names(self):
        obj = json.loads(serialize_line(SAMPLE_RECORDS[0]))
        assert obj["kind"] == "round"
        for key in ("t", "sampled", "loss", "acc", "wall_ms"):
            assert key in obj
        assert obj["t"] == 3
        assert obj["sampled"] == [1, 4, 9]
        assert obj["wall_ms"] == 120

    def test_agent_record_field_names(self):
        obj = json.loads(serialize_line(SAMPLE_RECORDS[1]))
        assert obj == {
            "kind": "agent",
            "t": 3,
            "agent": 4,
            "epoch": 2,
            "loss": 0.611,
            "acc": 0.81,
            "shard": 50,
        }

    def test_profile_record_field_names(self):
        obj = json.loads(serialize_line(SAMPLE_RECORDS[2]))
        assert obj == {
            "kind": "profile",
            "action": "local_train",
            "mean_s": 0.0125,
            "calls": 40,
            "total_s": 0.5,
            "pct": 62.5,
        }

    def test_parse_is_inverse_of_serialize(self):
        for record in SAMPLE_RECORDS:
            assert parse_line(serialize_line(record)) == record

    def test_float_values_round_trip_exactly(self):
        record = AgentRecord(1, 2, 3, 0.1 + 0.2, 1 / 3, 7)
        back = parse_line(serialize_line(record))
        assert back.train_loss == record.train_loss
        assert back.train_accuracy == record.train_accuracy

    def test_unknown_kind_rejected(self):
        with pytest.raises(TelemetryError):
            parse_line('{"kind":"mystery"}')
        with pytest.raises(TelemetryError):
            parse_line("not json")


class TestJsonlSink:
    def test_round_trip_through_file(self, tmp_path):
        path = tmp_path / "t.jsonl"
        with JsonlSink(path) as sink:
            for record in SAMPLE_RECORDS:
                sink.emit(record)
        assert read_jsonl(path) == SAMPLE_RECORDS

    def test_emit_after_close_rejected(self, tmp_path):
        sink = JsonlSink(tmp_path / "t.jsonl")
        sink.close()
        with pytest.raises(TelemetryError):
            sink.emit(SAMPLE_RECORDS[0])

    def test_concurrent_writers_no_torn_lines(self, tmp_path):
        # 8 threads x 200 records; every line must parse and counts match.
        path = tmp_path / "t.jsonl"
        sink = JsonlSink(path)

        def write(thread_id: int) -> None:
            for i in range(200):
                sink.emit(AgentRecord(i, thread_id, 1, 0.5, 0.5, 10))

        threads = [threading.Thread(target=write, args=(k,)) for k in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        sink.close()
        records = read_jsonl(path)
        assert len(records) == 1600
        per_thread = {k: 0 for k in range(8)}
        for r in records:
            per_thread[r.agent_id] += 1
        assert all(v == 200 for v in per_thread.values())


class TestCsvSink:
    def test_one_file_per_kind_with_headers(self, tmp_path):
        with CsvSink(tmp_path) as sink:
            for record in SAMPLE_RECORDS:
                sink.emit(record)
        assert (tmp_path / "rounds.csv").exists()
        assert (tmp_path / "agents.csv").exists()
        assert (tmp_path / "profile.csv").exists()
        assert (tmp_path / "rss.csv").exists()
        with open(tmp_path / "agents.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["kind", "t", "agent", "epoch", "loss", "acc", "shard"]
        assert len(rows) == 2

    def test_csv_round_trip(self, tmp_path):
        with CsvSink(tmp_path) as sink:
            for record in SAMPLE_RECORDS:
                sink.emit(record)
        back = []
        for name in ("rounds.csv", "agents.csv", "profile.csv", "rss.csv"):
            back.extend(read_csv_records(tmp_path / name))
        assert sorted(back, key=repr) == sorted(SAMPLE_RECORDS, key=repr)

    def test_quoting_survives_commas_in_action(self, tmp_path):
        entry = ProfileEntry('weird, "action"', 1.0, 1, 1.0, 100.0)
        with CsvSink(tmp_path) as sink:
            sink.emit(entry)
        assert read_csv_records(tmp_path / "profile.csv") == [entry]


def test_null_sink_accepts_everything():
    sink = NullSink()
    for record in SAMPLE_RECORDS:
        sink.emit(record)
    sink.flush()
    sink.close()
