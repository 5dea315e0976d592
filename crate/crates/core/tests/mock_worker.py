"""Scripted evaluation worker for the protocol tests.

The request's dataset name picks the behaviour.
"""
import json
import sys
import time

mode = sys.argv[1] if len(sys.argv) > 1 else "normal"
if mode == "silent":
    time.sleep(60)
    sys.exit(0)
if mode == "bad-version":
    print(json.dumps({"type": "hello", "protocol_version": 99, "capabilities": [[], []]}), flush=True)
    sys.exit(0)

print(json.dumps({
    "type": "hello",
    "protocol_version": 1,
    "capabilities": {"metrics": ["auc_roc", "accuracy"], "algorithms": ["mean", "svm", "knn"]},
}), flush=True)

served = 0
for line in sys.stdin:
    req = json.loads(line)
    rid = req["request_id"]
    behaviour = req["dataset"]
    served += 1
    reply = {"type": "result", "request_id": rid, "status": "ok"}
    if behaviour == "ok":
        c = req["hyperparams"]["svm"]["C"]
        reply["fold_scores"] = [round(0.5 + 0.1 * c + 0.01 * k, 6) for k in range(req["folds"])]
    elif behaviour == "served":
        reply["fold_scores"] = [min(1.0, served / 100.0)] * req["folds"]
    elif behaviour == "slow":
        time.sleep(0.3)
        reply["fold_scores"] = [0.5] * req["folds"]
    elif behaviour == "fail":
        reply.update(status="failed", message="estimator diverged")
    elif behaviour == "timeout":
        reply.update(status="timeout", message="fold 2 exceeded budget")
    elif behaviour == "hang":
        time.sleep(60)
    elif behaviour == "garbage":
        print("this is not json", flush=True)
        continue
    elif behaviour == "wrong-id":
        reply["request_id"] = rid + "-other"
        reply["fold_scores"] = [0.5] * req["folds"]
    elif behaviour == "die":
        sys.exit(3)
    print(json.dumps(reply), flush=True)
