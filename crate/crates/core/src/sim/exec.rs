//! Single-threaded discrete-event executor.
//!
//! Events are ordered by `(tick, seeded tiebreak, sequence)`, so equal-tick
//! events interleave in a seed-determined but reproducible order. Tasks are
//! ordinary futures; they only ever wait on [`Executor::sleep`] timers.

use std::cell::{Cell, RefCell};
use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::rc::Rc;
use std::sync::{Arc, Mutex};
use std::task::{Context, Poll, Wake, Waker};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Task = Pin<Box<dyn Future<Output = ()>>>;

enum Event {
    Wake(Waker),
    Call(Box<dyn FnOnce()>),
}

struct TaskWaker {
    id: usize,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.ready.lock().expect("ready queue").push_back(self.id);
    }
}

pub struct Executor {
    now: Cell<u64>,
    seq: Cell<u64>,
    processed: Cell<u64>,
    rng: RefCell<ChaCha8Rng>,
    queue: RefCell<BinaryHeap<Reverse<(u64, u64, u64)>>>,
    events: RefCell<BTreeMap<u64, Event>>,
    tasks: RefCell<Vec<Option<Task>>>,
    ready: Arc<Mutex<VecDeque<usize>>>,
}

impl Executor {
    pub fn new(seed: u64) -> Rc<Self> {
        Rc::new(Self {
            now: Cell::new(0),
            seq: Cell::new(0),
            processed: Cell::new(0),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
            queue: RefCell::new(BinaryHeap::new()),
            events: RefCell::new(BTreeMap::new()),
            tasks: RefCell::new(Vec::new()),
            ready: Arc::new(Mutex::new(VecDeque::new())),
        })
    }

    pub fn now(&self) -> u64 {
        self.now.get()
    }

    /// Events processed so far.
    pub fn processed(&self) -> u64 {
        self.processed.get()
    }

    pub fn pending_events(&self) -> usize {
        self.queue.borrow().len()
    }

    fn push(&self, at: u64, ev: Event) {
        let seq = self.seq.get();
        self.seq.set(seq + 1);
        let tiebreak = self.rng.borrow_mut().gen::<u64>();
        self.events.borrow_mut().insert(seq, ev);
        self.queue
            .borrow_mut()
            .push(Reverse((at.max(self.now()), tiebreak, seq)));
    }

    /// Runs `f` at tick `at`.
    pub fn schedule(&self, at: u64, f: impl FnOnce() + 'static) {
        self.push(at, Event::Call(Box::new(f)));
    }

    pub fn spawn(&self, fut: impl Future<Output = ()> + 'static) {
        let mut tasks = self.tasks.borrow_mut();
        tasks.push(Some(Box::pin(fut)));
        self.ready.lock().expect("ready queue").push_back(tasks.len() - 1);
    }

    /// Completes `ticks` ticks after the first poll.
    pub fn sleep(self: &Rc<Self>, ticks: u64) -> Sleep {
        Sleep {
            exec: self.clone(),
            ticks,
            until: None,
        }
    }

    fn run_ready(&self) {
        loop {
            let next = self.ready.lock().expect("ready queue").pop_front();
            let Some(id) = next else { break };
            let task = self.tasks.borrow_mut().get_mut(id).and_then(Option::take);
            let Some(mut task) = task else { continue };
            let waker = Waker::from(Arc::new(TaskWaker {
                id,
                ready: self.ready.clone(),
            }));
            let mut cx = Context::from_waker(&waker);
            if task.as_mut().poll(&mut cx).is_pending() {
                self.tasks.borrow_mut()[id] = Some(task);
            }
        }
    }

    /// Tick of the next event, if any.
    pub fn peek(&self) -> Option<u64> {
        self.queue.borrow().peek().map(|Reverse((at, _, _))| *at)
    }

    /// Processes one event and everything it makes ready. False when idle.
    pub fn step(&self) -> bool {
        self.run_ready();
        let Some(Reverse((at, _, seq))) = self.queue.borrow_mut().pop() else {
            return false;
        };
        self.now.set(at);
        self.processed.set(self.processed.get() + 1);
        let ev = self.events.borrow_mut().remove(&seq).expect("event");
        match ev {
            Event::Wake(w) => w.wake(),
            Event::Call(f) => f(),
        }
        self.run_ready();
        true
    }
}

pub struct Sleep {
    exec: Rc<Executor>,
    ticks: u64,
    until: Option<u64>,
}

impl Future for Sleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        match self.until {
            None if self.ticks == 0 => Poll::Ready(()),
            None => {
                let until = self.exec.now() + self.ticks;
                self.until = Some(until);
                self.exec.push(until, Event::Wake(cx.waker().clone()));
                Poll::Pending
            }
            Some(until) if self.exec.now() >= until => Poll::Ready(()),
            Some(_) => Poll::Pending,
        }
    }
}
