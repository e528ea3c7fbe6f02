import time

import numpy as np

from netable.autodiff import Adam, Graph
from netable.tasks import structured_qa as sq


def run(mode, seed, max_epochs=300, eval_every=20):
    rng = np.random.default_rng(seed)
    db = sq.generate_course_db(rng)
    train, test = sq.generate_qa_pairs(rng, db)
    vocab = sq.build_vocabulary(db, train, mode)
    init_rng = np.random.default_rng(seed + 1000)
    model = sq.QaModel(mode, db, vocab, rng=init_rng)
    opt = Adam(lr=0.01, eps=1e-8)
    shuffle_rng = np.random.default_rng(seed + 2000)
    t0 = time.time()
    for epoch in range(max_epochs):
        order = shuffle_rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), 16):
            chunk = order[start : start + 16]
            for i in chunk:
                g = Graph()
                loss = model.instance_loss(g, train[i])
                g.backward(loss, seed=1.0 / len(chunk))
                total += float(loss.data)
            opt.step(model.params)
        if epoch % eval_every == 0 or epoch == max_epochs - 1:
            te = sq.evaluate(model, test)
            tr = sq.evaluate(model, train[:100])
            print(
                f"{mode} ep{epoch:3d} loss={total/len(train):8.4f} "
                f"train={tr['retrieval']:5.1f} test={te['retrieval']:5.1f} "
                f"acc={te['acc']} acr={te['acr']} nn={te['arr_non_ne']} ne={te['arr_ne']} "
                f"t={time.time()-t0:6.1f}s",
                flush=True,
            )
            if tr["retrieval"] == 100.0 and mode == "with_ne":
                break
    te = sq.evaluate(model, test)
    print(f"== {mode} seed={seed}: {te} time={time.time()-t0:.1f}s", flush=True)
    return te


run("with_ne", 1, max_epochs=40, eval_every=5)
run("without_ne", 1, max_epochs=300, eval_every=20)
